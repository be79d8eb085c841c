//! Local edits in UV space: region masks, feature transfer between planes and
//! direct attribute deltas on decoded primitives.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{ParametricBodyModel, PartLabel};
use crate::gaussian::{GaussianAnchors, GaussianSet, UvFeaturePlane, LOGIT_LIMIT, LOG_SCALE_LIMIT};
use crate::io::{load_gray_png, read_json, save_gray_png, write_json};
use crate::math::{axis_angle_to_matrix, logit, sigmoid};
use crate::{Error, Result, Vec3};

/// Island dilation applied to every atlas region (texels).
pub const REGION_DILATION: usize = 2;
/// Default feather width of atlas regions (texels).
pub const DEFAULT_FEATHER: f64 = 2.0;
/// Nose radius as a fraction of the face region's vertical extent.
pub const NOSE_RADIUS_FRACTION: f64 = 0.25;
pub const NOSE: &str = "nose";

/// Binary texel selection with an optional feather band.
#[derive(Clone, Debug, PartialEq)]
pub struct UvMask {
    pub resolution: usize,
    /// Row-major, each value 0 or 1.
    pub values: Vec<u8>,
    /// Width of the linear blend band outside the mask (texels).
    pub feather: f64,
    pub label: String,
}

impl UvMask {
    pub fn empty(resolution: usize, label: impl Into<String>) -> Self {
        Self {
            resolution,
            values: vec![0; resolution * resolution],
            feather: 0.0,
            label: label.into(),
        }
    }

    pub fn from_fn(resolution: usize, label: impl Into<String>, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Self::empty(resolution, label);
        for y in 0..resolution {
            for x in 0..resolution {
                mask.values[y * resolution + x] = f(x, y) as u8;
            }
        }
        mask
    }

    pub fn with_feather(mut self, feather: f64) -> Self {
        self.feather = feather;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.resolution + x] != 0
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.resolution * self.resolution {
            return Err(Error::ShapeMismatch(format!(
                "mask `{}` has {} values for resolution {}",
                self.label,
                self.values.len(),
                self.resolution
            )));
        }
        if self.values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask `{}` is not binary", self.label)));
        }
        if !(self.feather.is_finite() && self.feather >= 0.0) {
            return Err(Error::InvalidArgument(format!("mask `{}` has a negative feather", self.label)));
        }
        Ok(())
    }

    /// Texel containing `uv`, clamped to the grid.
    pub fn texel_of(&self, uv: [f64; 2]) -> (usize, usize) {
        let max = self.resolution - 1;
        let idx = |v: f64| ((v * self.resolution as f64).floor().max(0.0) as usize).min(max);
        (idx(uv[0]), idx(uv[1]))
    }

    pub fn contains_uv(&self, uv: [f64; 2]) -> bool {
        let (x, y) = self.texel_of(uv);
        self.get(x, y)
    }

    /// Euclidean distance from each texel centre to the nearest selected
    /// texel, searched up to `reach`; `None` beyond.
    fn distances(&self, reach: usize) -> Vec<Option<f64>> {
        let r = self.resolution;
        let mut out = vec![None; r * r];
        for y in 0..r {
            for x in 0..r {
                if self.get(x, y) {
                    out[y * r + x] = Some(0.0);
                    continue;
                }
                let mut best: Option<f64> = None;
                for yy in y.saturating_sub(reach)..(y + reach + 1).min(r) {
                    for xx in x.saturating_sub(reach)..(x + reach + 1).min(r) {
                        if self.get(xx, yy) {
                            let d = ((xx as f64 - x as f64).powi(2) + (yy as f64 - y as f64).powi(2)).sqrt();
                            if d <= reach as f64 && best.is_none_or(|b| d < b) {
                                best = Some(d);
                            }
                        }
                    }
                }
                out[y * r + x] = best;
            }
        }
        out
    }

    /// Adds every texel within Euclidean distance `radius` of the mask for
    /// which `allowed` holds.
    pub fn dilate(&self, radius: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let dist = self.distances(radius);
        let r = self.resolution;
        let mut out = self.clone();
        for y in 0..r {
            for x in 0..r {
                if dist[y * r + x].is_some() && (self.get(x, y) || allowed(x, y)) {
                    out.values[y * r + x] = 1;
                }
            }
        }
        out
    }

    /// Blend weight per texel: 1 inside, `1 - d/(f+1)` at distance `d ≤ f`
    /// outside, 0 beyond the band.
    pub fn weights(&self) -> Vec<f64> {
        let reach = self.feather.floor() as usize;
        self.distances(reach)
            .into_iter()
            .map(|d| match d {
                Some(d) if d == 0.0 => 1.0,
                Some(d) if d <= self.feather => 1.0 - d / (self.feather + 1.0),
                _ => 0.0,
            })
            .collect()
    }

    /// 8-bit grey PNG, nonzero = selected.
    pub fn load_png(path: &Path, label: impl Into<String>) -> Result<Self> {
        let (w, h, bytes) = load_gray_png(path)?;
        if w != h {
            return Err(Error::format(path.display().to_string(), format!("mask must be square, got {w}×{h}")));
        }
        Ok(Self {
            resolution: w,
            values: bytes.into_iter().map(|b| (b != 0) as u8).collect(),
            feather: 0.0,
            label: label.into(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let bytes = self.values.iter().map(|&v| v * 255).collect();
        save_gray_png(path, self.resolution, self.resolution, bytes)
    }
}

/// Which half of the feature channels an edit touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Halves {
    Geometry,
    Appearance,
    Both,
}

impl std::str::FromStr for Halves {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(Self::Geometry),
            "appearance" => Ok(Self::Appearance),
            "both" => Ok(Self::Both),
            _ => Err(Error::InvalidArgument(format!("unknown plane half `{s}` (geometry, appearance or both)"))),
        }
    }
}

/// Copies `src` into `dst` over the mask (blended across the feather band)
/// in the selected channel halves. Everything else stays bit-identical to
/// `dst`.
pub fn transfer(src: &UvFeaturePlane, dst: &UvFeaturePlane, mask: &UvMask, halves: Halves) -> Result<UvFeaturePlane> {
    if !src.same_shape(dst) {
        return Err(Error::ShapeMismatch(format!(
            "source plane is {}²×{}, target is {}²×{}",
            src.resolution, src.channels, dst.resolution, dst.channels
        )));
    }
    mask.validate()?;
    if mask.resolution != dst.resolution {
        return Err(Error::ShapeMismatch(format!(
            "mask resolution {} differs from plane resolution {}",
            mask.resolution, dst.resolution
        )));
    }
    let split = dst.split_index();
    let channels = match halves {
        Halves::Geometry => 0..split,
        Halves::Appearance => split..dst.channels,
        Halves::Both => 0..dst.channels,
    };
    let weights = mask.weights();
    let texels = dst.texels();
    let mut out = dst.clone();
    for c in channels {
        let base = c * texels;
        for (t, &w) in weights.iter().enumerate() {
            let i = base + t;
            if w == 1.0 {
                out.data[i] = src.data[i];
            } else if w > 0.0 {
                out.data[i] = dst.data[i] + w * (src.data[i] - dst.data[i]);
            }
        }
    }
    Ok(out)
}

/// Named masks rasterised from the template's UV islands.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAtlas {
    pub resolution: usize,
    pub regions: BTreeMap<String, UvMask>,
}

/// Label held by at least two corners, otherwise body.
fn face_label(model: &ParametricBodyModel, face: &[u32; 3]) -> PartLabel {
    let l = face.map(|i| model.part_labels[i as usize]);
    if l[0] == l[1] || l[0] == l[2] {
        l[0]
    } else if l[1] == l[2] {
        l[1]
    } else {
        PartLabel::Body
    }
}

/// Marks texels whose centre lies in the UV triangle, plus the texel of its
/// centroid so thin triangles are never lost.
fn raster_triangle(mask: &mut UvMask, uv: &[[f64; 2]; 3]) {
    let r = mask.resolution as f64;
    let p: Vec<[f64; 2]> = uv.iter().map(|q| [q[0] * r, q[1] * r]).collect();
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if area != 0.0 {
        let lo = |i: usize| p.iter().map(|q| q[i]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let hi = |i: usize| (p.iter().map(|q| q[i]).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(mask.resolution);
        for y in lo(1)..hi(1) {
            for x in lo(0)..hi(0) {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                let edge = |a: &[f64; 2], b: &[f64; 2]| ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])) / area;
                let w = [edge(&p[1], &p[2]), edge(&p[2], &p[0]), edge(&p[0], &p[1])];
                if w.iter().all(|&w| w >= -1e-9) {
                    mask.values[y * mask.resolution + x] = 1;
                }
            }
        }
    }
    let centroid = [(uv[0][0] + uv[1][0] + uv[2][0]) / 3.0, (uv[0][1] + uv[1][1] + uv[2][1]) / 3.0];
    let (x, y) = mask.texel_of(centroid);
    mask.values[y * mask.resolution + x] = 1;
}

/// Undilated part regions, indexed by label.
fn part_cores(model: &ParametricBodyModel, resolution: usize) -> [UvMask; 4] {
    let mut cores = PartLabel::ALL.map(|l| UvMask::empty(resolution, l.name()));
    for (f, face) in model.faces.iter().enumerate() {
        raster_triangle(&mut cores[face_label(model, face) as usize], &model.uv_coords[f]);
    }
    cores
}

impl RegionAtlas {
    /// One region per part label plus a nose region: face triangles whose
    /// centroid lies within a fraction of the face height of the frontmost
    /// (+z) face vertex. Regions are dilated by [`REGION_DILATION`] texels
    /// without entering other parts' islands, and carry the default feather.
    pub fn from_model(model: &ParametricBodyModel, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("atlas resolution must be positive".into()));
        }
        model.validate()?;
        let cores = part_cores(model, resolution);

        let mut nose = UvMask::empty(resolution, NOSE);
        let face_vertices: Vec<Vec3> = (0..model.n_vertices())
            .filter(|&v| model.part_labels[v] == PartLabel::Face)
            .map(|v| model.vertices[v])
            .collect();
        if let Some(tip) = face_vertices.iter().copied().max_by(|a, b| a.z.total_cmp(&b.z)) {
            let (lo, hi) = face_vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
            let radius = NOSE_RADIUS_FRACTION * (hi - lo);
            for (f, face) in model.faces.iter().enumerate() {
                let centroid = face.iter().map(|&i| model.vertices[i as usize]).sum::<Vec3>() / 3.0;
                if face_label(model, face) == PartLabel::Face && (centroid - tip).norm() <= radius {
                    raster_triangle(&mut nose, &model.uv_coords[f]);
                }
            }
        }

        let mut occupied = vec![None; resolution * resolution];
        for (label, mask) in PartLabel::ALL.iter().zip(&cores) {
            for (t, &v) in mask.values.iter().enumerate() {
                if v != 0 && occupied[t].is_none() {
                    occupied[t] = Some(*label);
                }
            }
        }
        let free_for = |label: PartLabel| {
            let occupied = &occupied;
            move |x: usize, y: usize| occupied[y * resolution + x].is_none_or(|l| l == label)
        };
        let mut regions = BTreeMap::new();
        for (&label, mask) in PartLabel::ALL.iter().zip(&cores) {
            let dilated = mask.dilate(REGION_DILATION, free_for(label)).with_feather(DEFAULT_FEATHER);
            regions.insert(label.name().to_string(), dilated);
        }
        let nose = nose.dilate(REGION_DILATION, free_for(PartLabel::Face)).with_feather(DEFAULT_FEATHER);
        regions.insert(NOSE.to_string(), nose);
        Ok(Self { resolution, regions })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.regions.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&UvMask> {
        self.regions.get(name).ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    /// Anchors whose UV falls inside the region.
    pub fn select(&self, name: &str, anchors: &GaussianAnchors) -> Result<Vec<usize>> {
        let mask = self.get(name)?;
        Ok((0..anchors.len()).filter(|&k| mask.contains_uv(anchors.uvs[k])).collect())
    }

    /// Writes one PNG per region and a `regions.json` manifest (name → file).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        for (name, mask) in &self.regions {
            let file = format!("{name}.png");
            mask.save_png(&dir.join(&file))?;
            manifest.insert(name.clone(), file);
        }
        write_json(&dir.join("regions.json"), &manifest)
    }

    /// Reads a manifest; mask paths are relative to its directory. Loaded
    /// masks carry the default feather.
    pub fn load(manifest: &Path) -> Result<Self> {
        let entries: BTreeMap<String, String> = read_json(manifest)?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let mut regions = BTreeMap::new();
        let mut resolution = None;
        for (name, file) in entries {
            let mask = UvMask::load_png(&dir.join(&file), name.clone())?.with_feather(DEFAULT_FEATHER);
            if *resolution.get_or_insert(mask.resolution) != mask.resolution {
                return Err(Error::format(manifest.display().to_string(), "regions have different resolutions"));
            }
            regions.insert(name, mask);
        }
        let resolution = resolution.ok_or_else(|| Error::format(manifest.display().to_string(), "no regions"))?;
        Ok(Self { resolution, regions })
    }
}

/// Primitives an attribute edit applies to.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Region(String),
    Indices(Vec<usize>),
}

/// Deltas in the raw (pre-activation) domain of each attribute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeDelta {
    /// Canonical-space offset change (metres).
    pub offset: [f64; 3],
    /// Offset change along the anchor normal (metres).
    pub normal_offset: f64,
    /// Added to the opacity logit.
    pub opacity: f64,
    /// Added to the colour logits.
    pub color: [f64; 3],
    /// Added to the log scale residual.
    pub log_scale: [f64; 3],
    /// Local axis-angle rotation applied after the current one.
    pub rotation: [f64; 3],
}

/// Applies `delta` to the selected primitives of a canonical set, clamping
/// into the same ranges as decoding: offsets to `d_max`, logits to
/// `±LOGIT_LIMIT`, log residuals to `±LOG_SCALE_LIMIT`, scales to `s_max`.
pub fn edit_offsets(
    set: &GaussianSet,
    anchors: &GaussianAnchors,
    atlas: &RegionAtlas,
    selection: &Selection,
    delta: &AttributeDelta,
) -> Result<GaussianSet> {
    if set.len() != anchors.len() {
        return Err(Error::ShapeMismatch(format!("{} primitives for {} anchors", set.len(), anchors.len())));
    }
    let indices = match selection {
        Selection::Region(name) => atlas.select(name, anchors)?,
        Selection::Indices(list) => {
            if let Some(&k) = list.iter().find(|&&k| k >= set.len()) {
                return Err(Error::InvalidArgument(format!("primitive {k} out of range ({} primitives)", set.len())));
            }
            list.clone()
        }
    };
    let mut out = set.clone();
    let bump = |p: f64, d: f64| if d == 0.0 { p } else { sigmoid((logit(p) + d).clamp(-LOGIT_LIMIT, LOGIT_LIMIT)) };
    for k in indices {
        let g = &mut out.gaussians[k];
        let normal: Vec3 = anchors.frames[k].column(2).into();
        let mut offset = set.offsets[k] + Vec3::from(delta.offset) + normal * delta.normal_offset;
        let norm = offset.norm();
        if norm > anchors.offset_limit {
            offset *= anchors.offset_limit / norm;
        }
        out.offsets[k] = offset;
        g.position = set.anchor_positions[k] + offset;
        g.opacity = bump(g.opacity, delta.opacity);
        for i in 0..3 {
            g.color[i] = bump(g.color[i], delta.color[i]);
        }
        if delta.log_scale != [0.0; 3] {
            let residual = Vec3::from_fn(|i, _| (set.scale_residuals[k][i].ln() + delta.log_scale[i]).clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp());
            out.scale_residuals[k] = residual;
            g.scale = GaussianSet::compose_scale(&set.base_scales[k], &residual, set.scale_limit);
        }
        g.rotation *= axis_angle_to_matrix(&Vec3::from(delta.rotation));
    }
    out.check_finite()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{AssetConfig, AvatarAssets};
    use crate::body_model::generate_toy_model;
    use crate::gaussian::{DecoderConfig, DecoderParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn planes(res: usize) -> (UvFeaturePlane, UvFeaturePlane) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (UvFeaturePlane::random(res, 32, 1.0, &mut rng).unwrap(), UvFeaturePlane::random(res, 32, 1.0, &mut rng).unwrap())
    }

    fn square(res: usize, lo: usize, hi: usize) -> UvMask {
        UvMask::from_fn(res, "square", |x, y| (lo..hi).contains(&x) && (lo..hi).contains(&y))
    }

    #[test]
    fn self_transfer_is_identity() {
        let (a, _) = planes(16);
        let mask = square(16, 3, 9).with_feather(2.0);
        assert_eq!(transfer(&a, &a, &mask, Halves::Both).unwrap(), a);
    }

    #[test]
    fn swap_back_recovers_target() {
        let (a, b) = planes(16);
        let mask = square(16, 2, 7);
        for halves in [Halves::Geometry, Halves::Appearance, Halves::Both] {
            let edited = transfer(&a, &b, &mask, halves).unwrap();
            assert_ne!(edited, b);
            assert_eq!(transfer(&b, &edited, &mask, halves).unwrap(), b);
        }
    }

    #[test]
    fn transfer_touches_only_mask_band_and_half() {
        let (a, b) = planes(16);
        let mask = square(16, 5, 8).with_feather(2.0);
        let out = transfer(&a, &b, &mask, Halves::Appearance).unwrap();
        let weights = mask.weights();
        let split = b.split_index();
        for c in 0..b.channels {
            for y in 0..16 {
                for x in 0..16 {
                    let i = b.index(c, y, x);
                    let w = weights[y * 16 + x];
                    if c < split || w == 0.0 {
                        assert_eq!(out.data[i].to_bits(), b.data[i].to_bits());
                    } else if w == 1.0 {
                        assert_eq!(out.data[i], a.data[i]);
                    } else {
                        let expect = b.data[i] + w * (a.data[i] - b.data[i]);
                        assert!((out.data[i] - expect).abs() < 1e-15);
                    }
                }
            }
        }
        // The band reaches exactly two texels beyond the square.
        assert!(weights[5 * 16 + 3] > 0.0 && weights[5 * 16 + 2] == 0.0);
        assert!((weights[5 * 16 + 4] - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn transfer_rejects_mismatched_shapes() {
        let (a, _) = planes(16);
        let (c, _) = planes(8);
        assert!(matches!(transfer(&a, &c, &square(16, 0, 2), Halves::Both), Err(Error::ShapeMismatch(_))));
        assert!(matches!(transfer(&a, &a, &square(8, 0, 2), Halves::Both), Err(Error::ShapeMismatch(_))));
    }

    fn toy_assets() -> (crate::body_model::ParametricBodyModel, AvatarAssets) {
        let model = generate_toy_model(0, 1);
        let assets = AvatarAssets::build(
            &model,
            &AssetConfig {
                subdivision: 0,
                volume_resolution: 16,
                ..Default::default()
            },
        )
        .unwrap();
        (model, assets)
    }

    #[test]
    fn half_transfers_are_disentangled_after_decoding() {
        let (model, assets) = toy_assets();
        let (a, b) = planes(32);
        let dec = DecoderParams::init(32, &DecoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let atlas = RegionAtlas::from_model(&model, 32).unwrap();
        let mask = atlas.get("face").unwrap();
        let base = assets.canonical(&b, &dec).unwrap();

        let app = assets.canonical(&transfer(&a, &b, mask, Halves::Appearance).unwrap(), &dec).unwrap();
        let geo = assets.canonical(&transfer(&a, &b, mask, Halves::Geometry).unwrap(), &dec).unwrap();
        let (mut app_changed, mut geo_changed) = (false, false);
        for k in 0..base.len() {
            let (g0, ga, gg) = (&base.gaussians[k], &app.gaussians[k], &geo.gaussians[k]);
            assert_eq!(ga.position, g0.position);
            assert_eq!(ga.opacity, g0.opacity);
            assert_eq!(gg.scale, g0.scale);
            assert_eq!(gg.rotation, g0.rotation);
            assert_eq!(gg.color, g0.color);
            app_changed |= ga.color != g0.color;
            geo_changed |= gg.position != g0.position;
        }
        assert!(app_changed && geo_changed);
        app.check_invariants(assets.anchors.offset_limit).unwrap();
        geo.check_invariants(assets.anchors.offset_limit).unwrap();
    }

    #[test]
    fn atlas_regions_follow_part_islands() {
        let (model, assets) = toy_assets();
        let atlas = RegionAtlas::from_model(&model, 64).unwrap();
        let names: Vec<&str> = atlas.names().collect();
        assert_eq!(names, vec!["body", "face", "left_hand", "nose", "right_hand"]);
        let face = atlas.get("face").unwrap();
        let nose = atlas.get("nose").unwrap();
        assert!(nose.count() > 0 && nose.count() < face.count());
        assert!(nose.values.iter().zip(&face.values).all(|(n, f)| *n <= *f));
        // Dilation never enters another part's core and stays within two texels.
        let cores = part_cores(&model, 64);
        for a in PartLabel::ALL {
            let region = atlas.get(a.name()).unwrap();
            let core = &cores[a as usize];
            let near = core.dilate(REGION_DILATION, |_, _| true);
            for t in 0..64 * 64 {
                if region.values[t] == 1 && core.values[t] == 0 {
                    assert_eq!(near.values[t], 1);
                    assert!(PartLabel::ALL.iter().all(|&b| cores[b as usize].values[t] == 0), "{a:?} texel {t}");
                }
            }
            assert!(region.count() > core.count());
        }
        // Every anchor lands in the region of its own label.
        for (k, label) in assets.anchors.labels.iter().enumerate() {
            assert!(atlas.get(label.name()).unwrap().contains_uv(assets.anchors.uvs[k]), "anchor {k}");
        }
        let nose_anchors = atlas.select("nose", &assets.anchors).unwrap();
        assert!(!nose_anchors.is_empty());
        assert!(nose_anchors.iter().all(|&k| assets.anchors.labels[k] == PartLabel::Face));
        assert!(matches!(atlas.get("tail"), Err(Error::UnknownRegion(_))));
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mask = square(16, 6, 8);
        let grown = mask.dilate(2, |_, _| true);
        assert!(grown.get(4, 6) && !grown.get(3, 6));
        assert!(grown.get(5, 5) && !grown.get(4, 4));
        let blocked = mask.dilate(2, |x, _| x >= 6);
        assert!(!blocked.get(5, 6) && blocked.get(6, 4));
    }

    #[test]
    fn mask_and_atlas_files_round_trip() {
        let (model, _) = toy_assets();
        let atlas = RegionAtlas::from_model(&model, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        atlas.save(dir.path()).unwrap();
        let back = RegionAtlas::load(&dir.path().join("regions.json")).unwrap();
        assert_eq!(back, atlas);
        assert!(matches!(RegionAtlas::load(&dir.path().join("none.json")), Err(Error::MissingFile(_))));
    }

    fn canonical_set() -> (crate::body_model::ParametricBodyModel, AvatarAssets, GaussianSet) {
        let (model, assets) = toy_assets();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane = UvFeaturePlane::random(32, 32, 0.5, &mut rng).unwrap();
        let dec = DecoderParams::init(32, &DecoderConfig::default(), &mut rng).unwrap();
        let set = assets.canonical(&plane, &dec).unwrap();
        (model, assets, set)
    }

    #[test]
    fn empty_selection_is_identity() {
        let (model, assets, set) = canonical_set();
        let atlas = RegionAtlas::from_model(&model, 32).unwrap();
        let delta = AttributeDelta {
            normal_offset: 0.01,
            opacity: 1.0,
            ..Default::default()
        };
        let out = edit_offsets(&set, &assets.anchors, &atlas, &Selection::Indices(vec![]), &delta).unwrap();
        assert_eq!(out, set);
        assert!(matches!(
            edit_offsets(&set, &assets.anchors, &atlas, &Selection::Region("tail".into()), &delta),
            Err(Error::UnknownRegion(_))
        ));
    }

    #[test]
    fn nose_edit_moves_only_nose_primitives() {
        let (model, assets, set) = canonical_set();
        let atlas = RegionAtlas::from_model(&model, 32).unwrap();
        let delta = AttributeDelta {
            normal_offset: 0.2 * assets.anchors.offset_limit,
            ..Default::default()
        };
        let out = edit_offsets(&set, &assets.anchors, &atlas, &Selection::Region(NOSE.into()), &delta).unwrap();
        let nose = atlas.select(NOSE, &assets.anchors).unwrap();
        let mut moved = 0;
        for k in 0..set.len() {
            let d = (out.gaussians[k].position - set.gaussians[k].position).norm();
            if nose.contains(&k) {
                moved += (d > 0.0) as usize;
            } else {
                assert_eq!(d, 0.0);
                assert_eq!(out.gaussians[k], set.gaussians[k]);
            }
        }
        assert!(moved > 0);
        out.check_invariants(assets.anchors.offset_limit).unwrap();
    }

    #[test]
    fn oversized_deltas_are_clamped() {
        let (model, assets, set) = canonical_set();
        let atlas = RegionAtlas::from_model(&model, 32).unwrap();
        let limit = assets.anchors.offset_limit;
        for factor in [0.5, 1.0, 3.0, 100.0] {
            let delta = AttributeDelta {
                offset: [factor * limit, 0.0, 0.0],
                opacity: 1e3 * factor,
                color: [-1e3, 0.0, 1e3],
                log_scale: [50.0, -50.0, 0.1],
                rotation: [0.0, 0.3, 0.0],
                ..Default::default()
            };
            let all: Vec<usize> = (0..set.len()).collect();
            let out = edit_offsets(&set, &assets.anchors, &atlas, &Selection::Indices(all), &delta).unwrap();
            out.check_invariants(limit).unwrap();
            for k in 0..set.len() {
                assert!(out.offsets[k].norm() <= limit * (1.0 + 1e-12));
                assert!((out.gaussians[k].position - out.anchor_positions[k] - out.offsets[k]).norm() < 1e-12);
                for i in 0..3 {
                    let rho = out.scale_residuals[k][i].ln();
                    assert!(rho.abs() <= LOG_SCALE_LIMIT + 1e-12);
                }
            }
        }
        let bad = Selection::Indices(vec![set.len()]);
        assert!(edit_offsets(&set, &assets.anchors, &atlas, &bad, &AttributeDelta::default()).is_err());
    }

    #[test]
    fn halves_parse() {
        assert_eq!("appearance".parse::<Halves>().unwrap(), Halves::Appearance);
        assert!("left".parse::<Halves>().is_err());
    }
}
