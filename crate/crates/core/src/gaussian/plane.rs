use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Learnable UV feature plane, `[channel][row][column]`. Row `y` covers
/// `v ∈ [y/res, (y+1)/res)` and column `x` covers `u ∈ [x/res, (x+1)/res)`.
/// The first half of the channels drives geometry, the second appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct UvFeaturePlane {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl UvFeaturePlane {
    pub const DEFAULT_RESOLUTION: usize = 128;
    pub const DEFAULT_CHANNELS: usize = 32;

    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        if resolution == 0 || channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "feature plane needs a positive resolution and an even channel count (got {resolution}, {channels})"
            )));
        }
        Ok(Self {
            resolution,
            channels,
            data: vec![0.0; resolution * resolution * channels],
        })
    }

    pub fn random<R: Rng>(resolution: usize, channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut plane = Self::zeros(resolution, channels)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        plane.data.iter_mut().for_each(|v| *v = normal.sample(rng));
        Ok(plane)
    }

    pub fn split_index(&self) -> usize {
        self.channels / 2
    }

    pub fn texels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.resolution + y) * self.resolution + x
    }

    pub fn geometry(&self) -> &[f64] {
        &self.data[..self.split_index() * self.texels()]
    }

    pub fn appearance(&self) -> &[f64] {
        &self.data[self.split_index() * self.texels()..]
    }

    pub fn geometry_mut(&mut self) -> &mut [f64] {
        let n = self.split_index() * self.texels();
        &mut self.data[..n]
    }

    pub fn appearance_mut(&mut self) -> &mut [f64] {
        let n = self.split_index() * self.texels();
        &mut self.data[n..]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }

    pub fn validate(&self) -> Result<()> {
        if !self.channels.is_multiple_of(2) || self.channels == 0 || self.resolution == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature plane with {} channels at resolution {}",
                self.channels, self.resolution
            )));
        }
        if self.data.len() != self.channels * self.texels() {
            return Err(Error::ShapeMismatch(format!(
                "feature plane holds {} values, expected {}",
                self.data.len(),
                self.channels * self.texels()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                step: 0,
                term: format!("feature plane value {i}"),
            });
        }
        Ok(())
    }
}

/// Bilinear footprint of a UV sample: four texel offsets (within one channel)
/// and their weights. Sampling at an exact texel centre yields weight 1 on
/// that texel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub clamped: bool,
}

impl BilinearTap {
    pub fn new(uv: [f64; 2], resolution: usize) -> Self {
        let clamped = !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) || !uv.iter().all(|v| v.is_finite());
        let u = if uv[0].is_finite() { uv[0].clamp(0.0, 1.0) } else { 0.5 };
        let v = if uv[1].is_finite() { uv[1].clamp(0.0, 1.0) } else { 0.5 };
        let max = (resolution - 1) as f64;
        let fx = (u * resolution as f64 - 0.5).clamp(0.0, max);
        let fy = (v * resolution as f64 - 0.5).clamp(0.0, max);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(resolution - 1), (y0 + 1).min(resolution - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        Self {
            index: [y0 * resolution + x0, y0 * resolution + x1, y1 * resolution + x0, y1 * resolution + x1],
            weight: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
            clamped,
        }
    }

    /// Samples one channel plane (`res²` values).
    #[inline]
    pub fn sample(&self, channel: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..4 {
            if self.weight[i] != 0.0 {
                acc += self.weight[i] * channel[self.index[i]];
            }
        }
        acc
    }

    #[inline]
    pub fn splat(&self, channel: &mut [f64], value: f64) {
        for i in 0..4 {
            if self.weight[i] != 0.0 {
                channel[self.index[i]] += self.weight[i] * value;
            }
        }
    }
}
