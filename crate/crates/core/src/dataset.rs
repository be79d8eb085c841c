//! Multi-view subject datasets on disk:
//!
//! ```text
//! <subject>/images/<view>.png   views in file-name order
//! <subject>/cameras.json        array of cameras, same order
//! <subject>/pose.json           one parameter set, or an array with one per view
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::PoseShapeParams;
use crate::io::{load_png, read_json, save_png, write_json};
use crate::render::{Camera, Image};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Image,
    pub camera: Camera,
    pub params: PoseShapeParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub id: String,
    pub observations: Vec<Observation>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PoseFile {
    Shared(PoseShapeParams),
    PerView(Vec<PoseShapeParams>),
}

impl SubjectDataset {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        let first = observations
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("subject `{id}` has no observations")))?;
        let (w, h) = (first.image.width, first.image.height);
        for (i, o) in observations.iter().enumerate() {
            if o.image.width != w || o.image.height != h {
                return Err(Error::ShapeMismatch(format!(
                    "subject `{id}` view {i} is {}×{}, view 0 is {w}×{h}",
                    o.image.width, o.image.height
                )));
            }
            if o.camera.width != w || o.camera.height != h {
                return Err(Error::ShapeMismatch(format!(
                    "subject `{id}` view {i}: camera is {}×{} but the image is {w}×{h}",
                    o.camera.width, o.camera.height
                )));
            }
        }
        Ok(Self { id, observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Reads one subject directory; the id is the directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
        let image_dir = dir.join("images");
        if !image_dir.is_dir() {
            return Err(Error::MissingFile(image_dir));
        }
        let mut image_paths: Vec<_> = std::fs::read_dir(&image_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        image_paths.sort();
        if image_paths.len() != cameras.len() {
            return Err(Error::CountMismatch {
                subject: id,
                cameras: cameras.len(),
                images: image_paths.len(),
            });
        }
        let params = match read_json::<PoseFile>(&dir.join("pose.json"))? {
            PoseFile::Shared(p) => vec![p; cameras.len()],
            PoseFile::PerView(v) if v.len() == cameras.len() => v,
            PoseFile::PerView(v) => {
                return Err(Error::format(
                    dir.join("pose.json").display().to_string(),
                    format!("{} parameter sets for {} views", v.len(), cameras.len()),
                ))
            }
        };
        let observations = image_paths
            .iter()
            .zip(cameras)
            .zip(params)
            .map(|((path, camera), params)| {
                Ok(Observation {
                    image: load_png(path)?,
                    camera,
                    params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, observations)
    }

    /// Writes the subject under `dir` (created if needed); views are named
    /// `000.png`, `001.png`, ...
    pub fn save(&self, dir: &Path) -> Result<()> {
        let image_dir = dir.join("images");
        std::fs::create_dir_all(&image_dir)?;
        for (i, o) in self.observations.iter().enumerate() {
            save_png(&image_dir.join(format!("{i:03}.png")), &o.image)?;
        }
        let cameras: Vec<&Camera> = self.observations.iter().map(|o| &o.camera).collect();
        write_json(&dir.join("cameras.json"), &cameras)?;
        let first = &self.observations[0].params;
        if self.observations.iter().all(|o| &o.params == first) {
            write_json(&dir.join("pose.json"), first)
        } else {
            let all: Vec<&PoseShapeParams> = self.observations.iter().map(|o| &o.params).collect();
            write_json(&dir.join("pose.json"), &all)
        }
    }
}

/// Every subject directory under `root` (those holding a `cameras.json`), in
/// name order.
pub fn load_subjects(root: &Path) -> Result<Vec<SubjectDataset>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("cameras.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no subject directories under {}", root.display())));
    }
    dirs.iter().map(|d| SubjectDataset::load(d)).collect()
}
