use super::decoder::channel;
use super::plane::BilinearTap;
use super::{AttributeMaps, GaussianAnchors};
use crate::math::{axis_angle_to_matrix, matrix_to_axis_angle, radial_tanh, radial_tanh_vjp, rotation_grad_to_axis_angle, sigmoid};
use crate::{Error, Mat3, Result, Vec3};

/// Bound on the log scale residual (`exp(±ln 4)`).
pub const LOG_SCALE_LIMIT: f64 = std::f64::consts::LN_2 * 2.0;

/// One 3D Gaussian. The rotation is kept as a matrix; [`Gaussian::axis_angle`]
/// gives the axis-angle view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub opacity: f64,
    pub rotation: Mat3,
    pub scale: Vec3,
    pub color: Vec3,
}

impl Gaussian {
    pub fn new(position: Vec3, opacity: f64, axis_angle: Vec3, scale: Vec3, color: Vec3) -> Self {
        Self {
            position,
            opacity,
            rotation: axis_angle_to_matrix(&axis_angle),
            scale,
            color,
        }
    }

    pub fn axis_angle(&self) -> Vec3 {
        matrix_to_axis_angle(&self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Decoded primitives, one per anchor (index `k` refers to anchor `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    /// Position offsets `μ - μ̂` in canonical space.
    pub offsets: Vec<Vec3>,
    /// `exp(clamp(scale-raw))`, re-applied when scales are re-initialised.
    pub scale_residuals: Vec<Vec3>,
    /// `ŝ` the scales were built from (canonical or target pose).
    pub base_scales: Vec<Vec3>,
    /// Anchor positions in the same space as the Gaussians.
    pub anchor_positions: Vec<Vec3>,
    /// Scale upper bound `s_max`.
    pub scale_limit: f64,
    /// Number of UV samples that had to be clamped into `[0,1]²`.
    pub uv_clamped: usize,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// `s = min(ŝ ⊙ ρ, s_max)` componentwise.
    pub fn compose_scale(base: &Vec3, residual: &Vec3, limit: f64) -> Vec3 {
        base.component_mul(residual).map(|s| s.min(limit))
    }

    /// Chains `∂L/∂s` to `∂L/∂ρ` through [`GaussianSet::compose_scale`].
    pub fn residual_grad(&self, k: usize, grad_scale: &Vec3) -> Vec3 {
        let base = self.base_scales[k];
        let rho = self.scale_residuals[k];
        Vec3::from_fn(|i, _| {
            if base[i] * rho[i] < self.scale_limit {
                base[i] * grad_scale[i]
            } else {
                0.0
            }
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.gaussians.iter().position(|g| !g.is_finite()) {
            Some(k) => Err(Error::NonFiniteAttribute(k)),
            None => Ok(()),
        }
    }

    /// Range invariants: open-interval opacity and colour, positive bounded
    /// scales, bounded offsets, proper rotations.
    pub fn check_invariants(&self, offset_limit: f64) -> Result<()> {
        self.check_finite()?;
        for (k, g) in self.gaussians.iter().enumerate() {
            let unit = |v: f64| v > 0.0 && v < 1.0;
            let ok = unit(g.opacity)
                && g.color.iter().all(|&c| unit(c))
                && g.scale.iter().all(|&s| s > 0.0 && s <= self.scale_limit)
                && self.offsets[k].norm() <= offset_limit * (1.0 + 1e-12)
                && (g.rotation.transpose() * g.rotation - Mat3::identity()).abs().max() < 1e-6
                && g.rotation.determinant() > 0.0;
            if !ok {
                return Err(Error::InvalidArgument(format!("primitive {k} violates the attribute ranges")));
            }
        }
        Ok(())
    }
}

/// Raw map values of one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAttributes {
    pub offset: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: Vec3,
    pub color: Vec3,
}

impl RawAttributes {
    pub fn sample(maps: &AttributeMaps, tap: &BilinearTap) -> Self {
        let g = |c: usize| tap.sample(maps.geometry_channel(c));
        let a = |c: usize| tap.sample(maps.appearance_channel(c));
        Self {
            offset: Vec3::new(g(channel::OFFSET), g(channel::OFFSET + 1), g(channel::OFFSET + 2)),
            opacity: g(channel::OPACITY),
            scale: Vec3::new(a(channel::SCALE), a(channel::SCALE + 1), a(channel::SCALE + 2)),
            rotation: Vec3::new(a(channel::ROTATION), a(channel::ROTATION + 1), a(channel::ROTATION + 2)),
            color: Vec3::new(a(channel::COLOR), a(channel::COLOR + 1), a(channel::COLOR + 2)),
        }
    }
}

/// Raw opacity/colour values are clamped here so the activations stay in the
/// open unit interval in floating point.
pub const LOGIT_LIMIT: f64 = 30.0;

#[inline]
fn bounded_sigmoid(x: f64) -> f64 {
    sigmoid(x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT))
}

#[inline]
fn bounded_sigmoid_grad(x: f64) -> f64 {
    if x.abs() < LOGIT_LIMIT {
        let s = sigmoid(x);
        s * (1.0 - s)
    } else {
        0.0
    }
}

pub fn scale_residual(raw: &Vec3) -> Vec3 {
    raw.map(|v| v.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp())
}

/// Activations of one anchor: `(offset, opacity, residual, rotation, colour)`.
pub fn activate(raw: &RawAttributes, frame: &Mat3, offset_limit: f64) -> (Vec3, f64, Vec3, Mat3, Vec3) {
    (
        radial_tanh(&raw.offset, offset_limit),
        bounded_sigmoid(raw.opacity),
        scale_residual(&raw.scale),
        frame * axis_angle_to_matrix(&raw.rotation),
        raw.color.map(bounded_sigmoid),
    )
}

pub fn assemble(maps: &AttributeMaps, anchors: &GaussianAnchors, s_hat: &[Vec3]) -> Result<GaussianSet> {
    if s_hat.len() != anchors.len() {
        return Err(Error::ShapeMismatch(format!("{} scales for {} anchors", s_hat.len(), anchors.len())));
    }
    let mut set = GaussianSet {
        gaussians: Vec::with_capacity(anchors.len()),
        offsets: Vec::with_capacity(anchors.len()),
        scale_residuals: Vec::with_capacity(anchors.len()),
        base_scales: s_hat.to_vec(),
        anchor_positions: anchors.positions.clone(),
        scale_limit: anchors.scale_limit,
        uv_clamped: 0,
    };
    for k in 0..anchors.len() {
        let tap = BilinearTap::new(anchors.uvs[k], maps.resolution);
        if tap.clamped {
            set.uv_clamped += 1;
        }
        let raw = RawAttributes::sample(maps, &tap);
        let (offset, opacity, residual, rotation, color) = activate(&raw, &anchors.frames[k], anchors.offset_limit);
        set.gaussians.push(Gaussian {
            position: anchors.positions[k] + offset,
            opacity,
            rotation,
            scale: GaussianSet::compose_scale(&s_hat[k], &residual, anchors.scale_limit),
            color,
        });
        set.offsets.push(offset);
        set.scale_residuals.push(residual);
    }
    if set.uv_clamped > 0 {
        log::warn!("{} anchor UVs were clamped into [0,1]²", set.uv_clamped);
    }
    Ok(set)
}

/// Loss gradients with respect to the per-anchor activated attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGrads {
    /// `∂L/∂(μ - μ̂)`.
    pub offset: Vec<Vec3>,
    pub opacity: Vec<f64>,
    /// `∂L/∂ρ` for the scale residual.
    pub residual: Vec<Vec3>,
    /// `∂L/∂R` for the canonical rotation matrix.
    pub rotation: Vec<Mat3>,
    pub color: Vec<Vec3>,
}

impl AttributeGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            offset: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            residual: vec![Vec3::zeros(); n],
            rotation: vec![Mat3::zeros(); n],
            color: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    pub fn add(&mut self, other: &AttributeGrads) {
        for k in 0..self.len() {
            self.offset[k] += other.offset[k];
            self.opacity[k] += other.opacity[k];
            self.residual[k] += other.residual[k];
            self.rotation[k] += other.rotation[k];
            self.color[k] += other.color[k];
        }
    }
}

/// Loss gradients with respect to the activated attributes of each
/// primitive, in whatever space the set lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrads {
    pub position: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub scale: Vec<Vec3>,
    /// `∂L/∂R` for the rotation matrix.
    pub rotation: Vec<Mat3>,
    pub color: Vec<Vec3>,
}

impl PrimitiveGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            scale: vec![Vec3::zeros(); n],
            rotation: vec![Mat3::zeros(); n],
            color: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn add(&mut self, other: &PrimitiveGrads) {
        for k in 0..self.len() {
            self.position[k] += other.position[k];
            self.opacity[k] += other.opacity[k];
            self.scale[k] += other.scale[k];
            self.rotation[k] += other.rotation[k];
            self.color[k] += other.color[k];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity.iter().all(|x| x.is_finite())
            && self.scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl GaussianSet {
    /// Gradients of a set rendered in the space it was assembled in.
    pub fn canonical_grads(&self, grads: &PrimitiveGrads) -> AttributeGrads {
        AttributeGrads {
            offset: grads.position.clone(),
            opacity: grads.opacity.clone(),
            residual: (0..self.len()).map(|k| self.residual_grad(k, &grads.scale[k])).collect(),
            rotation: grads.rotation.clone(),
            color: grads.color.clone(),
        }
    }
}

/// Back-propagates attribute gradients into the raw attribute maps
/// (transposed bilinear sampling).
pub fn assemble_backward(maps: &AttributeMaps, anchors: &GaussianAnchors, grads: &AttributeGrads) -> AttributeMaps {
    let mut out = AttributeMaps::zeros(maps.resolution);
    let n = maps.resolution * maps.resolution;
    for k in 0..anchors.len() {
        let tap = BilinearTap::new(anchors.uvs[k], maps.resolution);
        let raw = RawAttributes::sample(maps, &tap);
        let d_offset = radial_tanh_vjp(&raw.offset, anchors.offset_limit, &grads.offset[k]);
        let d_opacity = grads.opacity[k] * bounded_sigmoid_grad(raw.opacity);
        let rho = scale_residual(&raw.scale);
        let d_scale = Vec3::from_fn(|i, _| {
            if raw.scale[i].abs() < LOG_SCALE_LIMIT {
                grads.residual[k][i] * rho[i]
            } else {
                0.0
            }
        });
        let d_rotation = rotation_grad_to_axis_angle(&raw.rotation, &(anchors.frames[k].transpose() * grads.rotation[k]));
        let d_color = Vec3::from_fn(|i, _| grads.color[k][i] * bounded_sigmoid_grad(raw.color[i]));
        let mut splat_g = |c: usize, v: f64| {
            if v != 0.0 {
                tap.splat(&mut out.geometry[c * n..(c + 1) * n], v)
            }
        };
        for i in 0..3 {
            splat_g(channel::OFFSET + i, d_offset[i]);
        }
        splat_g(channel::OPACITY, d_opacity);
        let mut splat_a = |c: usize, v: f64| {
            if v != 0.0 {
                tap.splat(&mut out.appearance[c * n..(c + 1) * n], v)
            }
        };
        for i in 0..3 {
            splat_a(channel::SCALE + i, d_scale[i]);
            splat_a(channel::ROTATION + i, d_rotation[i]);
            splat_a(channel::COLOR + i, d_color[i]);
        }
    }
    out
}
