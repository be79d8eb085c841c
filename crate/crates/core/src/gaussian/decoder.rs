use rand::Rng;
use serde::{Deserialize, Serialize};

use super::UvFeaturePlane;
use crate::nn::{ConvShape, ConvStack, StackCache};
use crate::{Error, Result};

/// Geometry decoder output channels: offset (3) then opacity (1).
pub const GEOMETRY_CHANNELS: usize = 4;
/// Appearance decoder output channels: scale (3), rotation (3), colour (3).
pub const APPEARANCE_CHANNELS: usize = 9;

pub mod channel {
    //! Channel offsets within the decoded maps.
    pub const OFFSET: usize = 0;
    pub const OPACITY: usize = 3;
    pub const SCALE: usize = 0;
    pub const ROTATION: usize = 3;
    pub const COLOR: usize = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    /// Multiplier on the final layer's initial weights.
    pub last_layer_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            kernel: 3,
            last_layer_scale: 0.1,
        }
    }
}

impl DecoderConfig {
    fn shapes(&self, input: usize, output: usize) -> Vec<ConvShape> {
        let layers = self.layers.max(1);
        (0..layers)
            .map(|i| {
                let cin = if i == 0 { input } else { self.hidden };
                let cout = if i + 1 == layers { output } else { self.hidden };
                ConvShape::new(cin, cout, self.kernel)
            })
            .collect()
    }
}

/// The two shared decoders `D_g` and `D_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub geometry: ConvStack,
    pub appearance: ConvStack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrads {
    pub geometry: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl DecoderGrads {
    pub fn add(&mut self, other: &DecoderGrads) {
        self.geometry.iter_mut().zip(&other.geometry).for_each(|(a, b)| *a += b);
        self.appearance.iter_mut().zip(&other.appearance).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.geometry.iter_mut().chain(self.appearance.iter_mut()).for_each(|a| *a *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.geometry.iter().chain(&self.appearance).all(|v| v.is_finite())
    }
}

impl DecoderParams {
    pub fn zeros(plane_channels: usize, config: &DecoderConfig) -> Result<Self> {
        let half = plane_channels / 2;
        Ok(Self {
            geometry: ConvStack::zeros(config.shapes(half, GEOMETRY_CHANNELS))?,
            appearance: ConvStack::zeros(config.shapes(half, APPEARANCE_CHANNELS))?,
        })
    }

    pub fn init<R: Rng>(plane_channels: usize, config: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let half = plane_channels / 2;
        Ok(Self {
            geometry: ConvStack::init(config.shapes(half, GEOMETRY_CHANNELS), config.last_layer_scale, rng)?,
            appearance: ConvStack::init(config.shapes(half, APPEARANCE_CHANNELS), config.last_layer_scale, rng)?,
        })
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            geometry: vec![0.0; self.geometry.params.len()],
            appearance: vec![0.0; self.appearance.params.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry.out_channels() != GEOMETRY_CHANNELS || self.appearance.out_channels() != APPEARANCE_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "decoders produce {} and {} channels, expected {GEOMETRY_CHANNELS} and {APPEARANCE_CHANNELS}",
                self.geometry.out_channels(),
                self.appearance.out_channels()
            )));
        }
        if !self.geometry.params.iter().chain(&self.appearance.params).all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                step: 0,
                term: "decoder parameters".into(),
            });
        }
        Ok(())
    }
}

/// Raw decoder outputs at plane resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMaps {
    pub resolution: usize,
    /// `[4][res][res]`: offset xyz, opacity.
    pub geometry: Vec<f64>,
    /// `[9][res][res]`: scale xyz, rotation xyz, colour rgb.
    pub appearance: Vec<f64>,
}

impl AttributeMaps {
    pub fn zeros(resolution: usize) -> Self {
        let n = resolution * resolution;
        Self {
            resolution,
            geometry: vec![0.0; GEOMETRY_CHANNELS * n],
            appearance: vec![0.0; APPEARANCE_CHANNELS * n],
        }
    }

    pub fn geometry_channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.geometry[c * n..(c + 1) * n]
    }

    pub fn appearance_channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.appearance[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.geometry.iter().chain(&self.appearance).all(|v| v.is_finite())
    }
}

pub struct DecodeCache {
    geometry: StackCache,
    appearance: StackCache,
}

fn check(plane: &UvFeaturePlane, params: &DecoderParams) -> Result<()> {
    let half = plane.split_index();
    if params.geometry.in_channels() != half || params.appearance.in_channels() != half {
        return Err(Error::ShapeMismatch(format!(
            "plane halves have {half} channels but decoders expect {} and {}",
            params.geometry.in_channels(),
            params.appearance.in_channels()
        )));
    }
    Ok(())
}

/// Geometry half through `D_g`, appearance half through `D_a`.
pub fn decode(plane: &UvFeaturePlane, params: &DecoderParams) -> Result<AttributeMaps> {
    Ok(decode_cached(plane, params)?.0)
}

pub fn decode_cached(plane: &UvFeaturePlane, params: &DecoderParams) -> Result<(AttributeMaps, DecodeCache)> {
    check(plane, params)?;
    let r = plane.resolution;
    let (geometry, gc) = params.geometry.forward_cached(plane.geometry(), r, r)?;
    let (appearance, ac) = params.appearance.forward_cached(plane.appearance(), r, r)?;
    Ok((
        AttributeMaps {
            resolution: r,
            geometry,
            appearance,
        },
        DecodeCache {
            geometry: gc,
            appearance: ac,
        },
    ))
}

/// Accumulates decoder gradients and returns the plane gradient (same layout
/// as the plane data).
pub fn decode_backward(
    params: &DecoderParams,
    cache: &DecodeCache,
    grad_maps: &AttributeMaps,
    grads: &mut DecoderGrads,
) -> Vec<f64> {
    let mut g = params
        .geometry
        .backward(&cache.geometry, &grad_maps.geometry, &mut grads.geometry, true)
        .expect("input gradient requested");
    let a = params
        .appearance
        .backward(&cache.appearance, &grad_maps.appearance, &mut grads.appearance, true)
        .expect("input gradient requested");
    g.extend(a);
    g
}
