//! Small rotation and activation helpers shared across the pipeline.

use nalgebra::{Rotation3, UnitQuaternion};

use crate::{Error, Mat3, Result, Vec3};

/// Below this angle the Rodrigues coefficients are replaced by their series.
const SMALL_ANGLE: f64 = 1e-6;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn axis_angle_to_matrix(r: &Vec3) -> Mat3 {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let k2 = k * k;
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // I + K + K²/2; the dropped terms are O(θ³).
        return Mat3::identity() + k + 0.5 * k2;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k2
}

/// Inverse of [`axis_angle_to_matrix`], returning the vector with angle in [0, π].
///
/// Goes through a quaternion, which stays well conditioned near π.
pub fn matrix_to_axis_angle(m: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    q.scaled_axis()
}

/// Partial derivatives `∂R/∂r_i` of the Rodrigues map, for i = 0..3.
pub fn axis_angle_derivatives(r: &Vec3) -> [Mat3; 3] {
    let theta2 = r.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        let k = skew(r);
        return basis.map(|e| {
            let ei = skew(&e);
            ei + 0.5 * (ei * k + k * ei)
        });
    }
    // Gallego & Yezzi closed form: ∂R/∂r_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|².
    let rot = axis_angle_to_matrix(r);
    let k = skew(r);
    let i_minus_r = Mat3::identity() - rot;
    let mut out = [Mat3::zeros(); 3];
    for (i, e) in basis.iter().enumerate() {
        let v = r.cross(&(i_minus_r * e));
        out[i] = (r[i] * k + skew(&v)) * rot / theta2;
    }
    out
}

/// Chain a gradient w.r.t. a rotation matrix to its axis-angle parameters.
pub fn rotation_grad_to_axis_angle(r: &Vec3, grad_matrix: &Mat3) -> Vec3 {
    let d = axis_angle_derivatives(r);
    Vec3::new(
        d[0].component_mul(grad_matrix).sum(),
        d[1].component_mul(grad_matrix).sum(),
        d[2].component_mul(grad_matrix).sum(),
    )
}

/// Nearest rotation to `m` in Frobenius norm (orthogonal polar factor).
pub fn polar_rotation(m: &Mat3) -> Result<Mat3> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDeterminant(f64::NAN));
    }
    let det = m.determinant();
    let scale = m.norm().max(f64::MIN_POSITIVE);
    // det relative to |M|³ so the singularity test is scale free.
    if det <= 1e-12 * scale * scale * scale {
        return Err(Error::NotPositiveDeterminant(det));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut rot = u * v_t;
    if rot.determinant() < 0.0 {
        // Numerically impossible for det M > 0, but keep the output proper.
        let mut u = u;
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        u.column_mut(smallest).neg_mut();
        rot = u * v_t;
    }
    Ok(rot)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Radially saturating offset `limit · tanh(|x|) · x/|x|`, so `|f(x)| < limit`.
pub fn radial_tanh(x: &Vec3, limit: f64) -> Vec3 {
    let n = x.norm();
    if n < 1e-8 {
        return x * (limit * (1.0 - n * n / 3.0));
    }
    x * (limit * n.tanh() / n)
}

/// Vector-Jacobian product of [`radial_tanh`] (its Jacobian is symmetric).
pub fn radial_tanh_vjp(x: &Vec3, limit: f64, grad_out: &Vec3) -> Vec3 {
    let n = x.norm();
    let (a, b) = if n < 1e-4 {
        // tanh(n)/n ≈ 1 - n²/3 ; (sech²n - tanh(n)/n)/n² ≈ -2/3 + 8n²/15
        (1.0 - n * n / 3.0, -2.0 / 3.0 + 8.0 * n * n / 15.0)
    } else {
        let t = n.tanh();
        let sech2 = 1.0 - t * t;
        (t / n, (sech2 - t / n) / (n * n))
    };
    limit * (a * grad_out + b * x * x.dot(grad_out))
}
