use std::collections::HashMap;

use crate::body_model::{DensifiedMesh, ParametricBodyModel, PartLabel};
use crate::{Error, Mat3, Result, Vec3};

/// Lower clamp on initial scales (metres).
pub const MIN_SCALE: f64 = 1e-5;
/// Offset clamp as a multiple of the mean anchor spacing.
pub const OFFSET_LIMIT_FACTOR: f64 = 2.0;
/// Scale clamp as a multiple of the mean anchor spacing.
pub const SCALE_LIMIT_FACTOR: f64 = 10.0;

/// Fixed per-primitive priors: one anchor per densified face.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAnchors {
    /// Face centres in canonical neutral space.
    pub positions: Vec<Vec3>,
    /// Tangent frames (column 3 is the face normal).
    pub frames: Vec<Mat3>,
    pub uvs: Vec<[f64; 2]>,
    /// Vertex indices of the anchor face; the anchor sits at barycentre ⅓,⅓,⅓.
    pub faces: Vec<[u32; 3]>,
    /// Edge-adjacent anchors, sorted ascending.
    pub neighbors: Vec<Vec<usize>>,
    pub labels: Vec<PartLabel>,
    pub mean_spacing: f64,
    /// Maximum offset norm `d_max`.
    pub offset_limit: f64,
    /// Maximum scale `s_max`.
    pub scale_limit: f64,
}

pub const ANCHOR_BARY: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

impl GaussianAnchors {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Anchor indices carrying `label`.
    pub fn with_label(&self, label: PartLabel) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.labels[k] == label).collect()
    }

    /// Interpolates a per-vertex quantity at each anchor.
    pub fn interpolate<F: Fn(usize) -> Vec3>(&self, k: usize, f: F) -> Vec3 {
        let [a, b, c] = self.faces[k].map(|i| f(i as usize));
        (a + b + c) / 3.0
    }
}

/// Orthonormal frame of a triangle: column 3 is the unit normal, column 1 the
/// first edge projected into the face plane.
pub fn tangent_frame(v: [Vec3; 3]) -> Result<Mat3> {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let n = e1.cross(&e2);
    let scale = e1.norm() * e2.norm();
    if !(n.norm() > 1e-12 * scale) || scale == 0.0 {
        return Err(Error::InvalidArgument("degenerate triangle".into()));
    }
    let n = n.normalize();
    let t = (e1 - n * n.dot(&e1)).normalize();
    let b = n.cross(&t);
    Ok(Mat3::from_columns(&[t, b, n]))
}

pub fn init_anchors(mesh: &DensifiedMesh) -> Result<GaussianAnchors> {
    init_anchors_on(&mesh.mesh)
}

/// Anchors on an arbitrary (already densified) template.
pub fn init_anchors_on(model: &ParametricBodyModel) -> Result<GaussianAnchors> {
    let nf = model.faces.len();
    if nf == 0 {
        return Err(Error::InvalidModel("mesh has no faces".into()));
    }
    let mut positions = Vec::with_capacity(nf);
    let mut frames = Vec::with_capacity(nf);
    let mut uvs = Vec::with_capacity(nf);
    let mut labels = Vec::with_capacity(nf);
    for (f, face) in model.faces.iter().enumerate() {
        let v = face.map(|i| model.vertices[i as usize]);
        frames.push(tangent_frame(v).map_err(|_| Error::DegenerateFace(f))?);
        positions.push((v[0] + v[1] + v[2]) / 3.0);
        let uv = model.uv_coords[f];
        uvs.push([
            (uv[0][0] + uv[1][0] + uv[2][0]) / 3.0,
            (uv[0][1] + uv[1][1] + uv[2][1]) / 3.0,
        ]);
        labels.push(majority_label(face.map(|i| model.part_labels[i as usize])));
    }

    let mut edge_faces: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (f, face) in model.faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (face[e], face[(e + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    let mut neighbors = vec![Vec::new(); nf];
    for faces in edge_faces.values() {
        for &a in faces {
            for &b in faces {
                if a != b {
                    neighbors[a].push(b);
                }
            }
        }
    }
    let (mut total, mut pairs) = (0.0, 0usize);
    for (a, list) in neighbors.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        for &b in list.iter().filter(|&&b| b > a) {
            total += (positions[a] - positions[b]).norm();
            pairs += 1;
        }
    }
    let mean_spacing = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    Ok(GaussianAnchors {
        positions,
        frames,
        uvs,
        faces: model.faces.clone(),
        neighbors,
        labels,
        mean_spacing,
        offset_limit: OFFSET_LIMIT_FACTOR * mean_spacing,
        scale_limit: SCALE_LIMIT_FACTOR * mean_spacing,
    })
}

/// Label held by at least two corners; otherwise body.
fn majority_label(corners: [PartLabel; 3]) -> PartLabel {
    if corners[0] == corners[1] || corners[0] == corners[2] {
        corners[0]
    } else if corners[1] == corners[2] {
        corners[1]
    } else {
        PartLabel::Body
    }
}

/// `ŝ_k`: half the mean distance from `positions[k]` to its neighbours,
/// clamped to `[MIN_SCALE, s_max]` and replicated on all three axes.
pub fn initial_scales(anchors: &GaussianAnchors, positions: &[Vec3]) -> Result<Vec<Vec3>> {
    if positions.len() != anchors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} anchors",
            positions.len(),
            anchors.len()
        )));
    }
    let upper = anchors.scale_limit.max(MIN_SCALE);
    anchors
        .neighbors
        .iter()
        .enumerate()
        .map(|(k, list)| {
            if list.is_empty() {
                return Err(Error::NoNeighbors(k));
            }
            let mean = list.iter().map(|&j| (positions[k] - positions[j]).norm()).sum::<f64>() / list.len() as f64;
            let s = (0.5 * mean).clamp(MIN_SCALE, upper);
            Ok(Vec3::repeat(s))
        })
        .collect()
}
