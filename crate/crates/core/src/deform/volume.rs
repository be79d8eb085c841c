use rayon::prelude::*;

use super::KdTree;
use crate::body_model::DensifiedMesh;
use crate::{Error, Result, Vec3};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_K: usize = 16;
/// Bounding-box padding on every side, as a fraction of the box extent.
pub const PADDING: f64 = 0.1;
const DISTANCE_EPS: f64 = 1e-8;

/// Dense grid of normalized skinning weights. Voxel `(i, j, l)` has its centre
/// at `min + (i + ½, j + ½, l + ½) ⊙ cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningVolume {
    pub resolution: usize,
    pub min: Vec3,
    pub max: Vec3,
    pub n_joints: usize,
    pub k: usize,
    /// `[z][y][x][joint]`.
    pub weights: Vec<f64>,
}

impl SkinningVolume {
    pub fn cell(&self) -> Vec3 {
        (self.max - self.min) / self.resolution as f64
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let cell = self.cell();
        self.min + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5).component_mul(&cell)
    }

    pub fn voxel_weights(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let v = self.voxel_index(x, y, z);
        &self.weights[v * self.n_joints..(v + 1) * self.n_joints]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 2 || self.n_joints == 0 || self.weights.len() != r * r * r * self.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "volume of resolution {r} with {} joints holds {} weights",
                self.n_joints,
                self.weights.len()
            )));
        }
        if !(0..3).all(|a| self.max[a] > self.min[a]) {
            return Err(Error::InvalidArgument("volume bounds are empty".into()));
        }
        for (v, row) in self.weights.chunks(self.n_joints).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::WeightNotNormalized { row: v, sum });
            }
        }
        Ok(())
    }

    /// Trilinear interpolation between voxel centres, renormalized. Points
    /// outside the centre lattice are clamped onto it.
    pub fn query(&self, p: &Vec3) -> Vec<f64> {
        let r = self.resolution;
        let cell = self.cell();
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / cell[a] - 0.5).clamp(0.0, (r - 1) as f64);
            let f = if f.is_finite() { f } else { 0.0 };
            let i = (f.floor() as usize).min(r - 2);
            base[a] = i;
            t[a] = f - i as f64;
        }
        let mut out = vec![0.0; self.n_joints];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                * (if dz == 1 { t[2] } else { 1.0 - t[2] });
            if w == 0.0 {
                continue;
            }
            let row = self.voxel_weights(base[0] + dx, base[1] + dy, base[2] + dz);
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        let sum: f64 = out.iter().sum();
        if sum > 0.0 {
            out.iter_mut().for_each(|v| *v /= sum);
        }
        out
    }
}

/// Inverse-distance blend of the skinning weights of the `k` nearest mesh
/// vertices, sampled at every voxel centre.
pub fn build_skinning_volume(mesh: &DensifiedMesh, k: usize, resolution: usize) -> Result<SkinningVolume> {
    if k == 0 || resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "skinning volume needs K ≥ 1 and resolution ≥ 8 (got K={k}, resolution={resolution})"
        )));
    }
    let model = &mesh.mesh;
    if model.vertices.is_empty() {
        return Err(Error::InvalidModel("mesh has no vertices".into()));
    }
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for v in &model.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    // Flat meshes still need a volume with positive extent on every axis.
    let extent = (hi - lo).map(|e| e.max(1e-3));
    let min = lo - PADDING * extent;
    let max = hi + PADDING * extent;
    let nj = model.n_joints();
    let tree = KdTree::new(&model.vertices);
    let mut volume = SkinningVolume {
        resolution,
        min,
        max,
        n_joints: nj,
        k,
        weights: vec![0.0; resolution * resolution * resolution * nj],
    };
    let centers: Vec<Vec3> = (0..resolution * resolution * resolution)
        .map(|v| {
            let (x, y, z) = (v % resolution, (v / resolution) % resolution, v / (resolution * resolution));
            volume.voxel_center(x, y, z)
        })
        .collect();
    volume
        .weights
        .par_chunks_mut(nj)
        .zip(centers.par_iter())
        .for_each(|(row, c)| {
            for (vi, d) in tree.nearest(c, k) {
                let inv = 1.0 / (d + DISTANCE_EPS);
                for (o, w) in row.iter_mut().zip(model.weight_row(vi)) {
                    *o += inv * w;
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        });
    Ok(volume)
}
