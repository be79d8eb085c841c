use super::Camera;
use crate::gaussian::Gaussian;
use crate::{Mat3, Vec3};
use nalgebra::{Matrix2, Matrix2x3, Vector2};

/// Isotropic screen-space low-pass added to every projected covariance, px².
pub const LOW_PASS: f64 = 0.3;
/// Screen-space margin, in standard deviations, for frustum culling.
pub const CULL_SIGMA: f64 = 3.0;
/// Contributions with smaller alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub index: usize,
    pub mean: [f64; 2],
    /// Screen covariance `(xx, xy, yy)` including the low-pass.
    pub cov: [f64; 3],
    /// Inverse covariance `(a, b, c)`: `α = o·exp(-½(a dx² + 2b dx dy + c dy²))`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    /// Beyond this pixel distance from the mean, alpha is below `ALPHA_MIN`.
    pub radius: f64,
}

impl Splat2D {
    /// `(power, dx, dy)` at the centre of pixel `(x, y)`.
    #[inline]
    pub fn power_at(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let dx = x as f64 + 0.5 - self.mean[0];
        let dy = y as f64 + 0.5 - self.mean[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy, dx, dy)
    }

    /// Whether the splat can reach the image at all.
    pub fn is_visible(&self) -> bool {
        self.opacity >= ALPHA_MIN
    }

    /// Inclusive pixel range `(x0, x1, y0, y1)` whose centres lie within the
    /// radius, clipped to the image; `None` if empty.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if !self.is_visible() {
            return None;
        }
        let span = |centre: f64, size: usize| {
            let lo = (centre - self.radius - 0.5).ceil().max(0.0);
            let hi = (centre + self.radius - 0.5).floor().min(size as f64 - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let (x0, x1) = span(self.mean[0], width)?;
        let (y0, y1) = span(self.mean[1], height)?;
        Some((x0, x1, y0, y1))
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance_3d(g: &Gaussian) -> Mat3 {
    let m = g.rotation * Mat3::from_diagonal(&g.scale);
    m * m.transpose()
}

fn jacobian(cam: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Projects one primitive; `None` when it is outside the depth range or its
/// mean lies beyond the image expanded by `CULL_SIGMA` standard deviations.
pub fn project(g: &Gaussian, index: usize, cam: &Camera) -> Option<Splat2D> {
    let p = cam.to_camera(&g.position);
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let t = jacobian(cam, &p) * cam.rotation;
    let cov = t * covariance_3d(g) * t.transpose() + Matrix2::identity() * LOW_PASS;
    let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let sigma = lambda_max.sqrt();
    let mean = [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy];
    let margin = CULL_SIGMA * sigma;
    if mean[0] < -margin
        || mean[0] > cam.width as f64 + margin
        || mean[1] < -margin
        || mean[1] > cam.height as f64 + margin
    {
        return None;
    }
    let reach = if g.opacity >= ALPHA_MIN {
        (2.0 * (g.opacity / ALPHA_MIN).ln() * lambda_max).sqrt()
    } else {
        0.0
    };
    Some(Splat2D {
        index,
        mean,
        cov: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: p.z,
        opacity: g.opacity,
        color: g.color,
        // Padding absorbs rounding at the exact cutoff distance.
        radius: reach * (1.0 + 1e-9) + 1e-9,
    })
}

/// Gradients with respect to a splat's screen-space parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// 3D attribute gradients of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectGrad {
    pub position: Vec3,
    pub scale: Vec3,
    pub rotation: Mat3,
}

/// Back-propagates screen-space gradients through `project` (the low-pass
/// and the cull test have no gradient).
pub fn project_backward(g: &Gaussian, cam: &Camera, splat: &Splat2D, grad: &SplatGrad) -> ProjectGrad {
    let w = cam.rotation;
    let p = cam.to_camera(&g.position);
    let j = jacobian(cam, &p);
    let t = j * w;
    let m = g.rotation * Mat3::from_diagonal(&g.scale);
    let sigma = m * m.transpose();

    let [a, b, c] = splat.conic;
    let q = Matrix2::new(a, b, b, c);
    let gq = Matrix2::new(grad.conic[0], 0.5 * grad.conic[1], 0.5 * grad.conic[1], grad.conic[2]);
    let g_cov2 = -(q * gq * q);
    let g_sigma = t.transpose() * g_cov2 * t;
    let g_t = 2.0 * g_cov2 * t * sigma;
    let g_j = g_t * w.transpose();

    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let mut g_p = Vec3::zeros();
    let gm = Vector2::new(grad.mean[0], grad.mean[1]);
    g_p.x += gm.x * cam.fx * iz;
    g_p.y += gm.y * cam.fy * iz;
    g_p.z -= (gm.x * cam.fx * p.x + gm.y * cam.fy * p.y) * iz2;
    g_p.x -= g_j[(0, 2)] * cam.fx * iz2;
    g_p.y -= g_j[(1, 2)] * cam.fy * iz2;
    g_p.z += -g_j[(0, 0)] * cam.fx * iz2 + 2.0 * g_j[(0, 2)] * cam.fx * p.x * iz2 * iz - g_j[(1, 1)] * cam.fy * iz2
        + 2.0 * g_j[(1, 2)] * cam.fy * p.y * iz2 * iz;

    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let scale = Vec3::from_fn(|i, _| g_m.column(i).dot(&g.rotation.column(i)));
    ProjectGrad {
        position: w.transpose() * g_p,
        scale,
        rotation: g_m * Mat3::from_diagonal(&g.scale),
    }
}

/// Unit normal along the shortest axis, oriented towards the camera, in
/// camera coordinates.
pub fn view_normal(g: &Gaussian, cam: &Camera) -> Vec3 {
    let axis = (0..3).fold(0, |best, i| if g.scale[i] < g.scale[best] { i } else { best });
    let n = cam.rotation * g.rotation.column(axis).into_owned();
    let p = cam.to_camera(&g.position);
    if n.dot(&p) > 0.0 {
        -n
    } else {
        n
    }
}

/// Maps a camera-space unit normal to RGB in `[0,1]³` using the usual
/// normal-map axes (x right, y up, z towards the viewer).
pub fn encode_normal(n: &Vec3) -> Vec3 {
    Vec3::new(0.5 * (n.x + 1.0), 0.5 * (1.0 - n.y), 0.5 * (1.0 - n.z))
}
