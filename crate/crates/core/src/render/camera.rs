use serde::{Deserialize, Serialize};

use crate::{Error, Mat3, Result, Vec3};

/// Pinhole camera. Camera space is x right, y down, z forward; pixel `(x, y)`
/// has its centre at `(x + ½, y + ½)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` mapped to image-up and
    /// the principal point at the image centre.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = target - eye;
        let right = forward.cross(&up);
        if forward.norm() < 1e-12 || right.norm() < 1e-12 * forward.norm() {
            return Err(Error::InvalidArgument("look_at needs distinct eye/target and a non-parallel up".into()));
        }
        let z = forward.normalize();
        let x = right.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// `n` cameras evenly spaced on a horizontal circle around `target`,
    /// starting in front (+z) of it.
    pub fn orbit(n: usize, target: Vec3, radius: f64, elevation: f64, focal: f64, size: usize) -> Result<Vec<Self>> {
        (0..n)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let eye = target + Vec3::new(radius * phi.sin(), elevation, radius * phi.cos());
                Self::look_at(eye, target, Vec3::y(), focal, size, size)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far].iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("camera has non-finite parameters".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera image size must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        let gram = self.rotation.transpose() * self.rotation - Mat3::identity();
        if gram.abs().max() > 1e-6 || self.rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera centre in world space.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Same camera with the image resampled to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major rigid world-to-camera transform.
    world_to_cam: [[f64; 4]; 4],
    near: f64,
    far: f64,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let m = &r.world_to_cam;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("world_to_cam last row must be [0, 0, 0, 1]".into()));
        }
        let cam = Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            rotation: Mat3::from_fn(|i, j| m[i][j]),
            translation: Vec3::new(m[0][3], m[1][3], m[2][3]),
            near: r.near,
            far: r.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_cam: std::array::from_fn(|i| {
                std::array::from_fn(|j| match (i, j) {
                    (3, 3) => 1.0,
                    (3, _) => 0.0,
                    (_, 3) => c.translation[i],
                    _ => c.rotation[(i, j)],
                })
            }),
            near: c.near,
            far: c.far,
        }
    }
}
