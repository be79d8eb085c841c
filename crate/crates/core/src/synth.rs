//! Synthetic ground truth: procedurally coloured Gaussian avatars on the toy
//! template, camera rigs around them, rendered datasets, and a tiny
//! octahedron template for small gradient checks.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assets::AvatarAssets;
use crate::body_model::{Basis, ParametricBodyModel, PartLabel, PoseShapeParams};
use crate::dataset::{Observation, SubjectDataset};
use crate::gaussian::{Gaussian, GaussianSet};
use crate::render::{rasterize, Camera};
use crate::{Error, Result, Vec3};

/// Centre of the toy body, used as the camera target.
pub const TOY_CENTER: [f64; 3] = [0.0, 0.9, 0.0];
pub const GT_OPACITY: f64 = 0.9;
/// Ground-truth scale residual `ρ`.
pub const GT_RESIDUAL: f64 = 1.2;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp(a: &Vec3, b: &Vec3, t: f64) -> Vec3 {
    a * (1.0 - t) + b * t
}

/// Clothing and skin colours of one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [f64; 3],
    pub shirt: [f64; 3],
    pub stripe: [f64; 3],
    pub pants: [f64; 3],
    pub shoes: [f64; 3],
    /// Stripe cycles per metre along the body axis.
    pub stripe_frequency: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            skin: [0.85, 0.66, 0.52],
            shirt: [0.20, 0.45, 0.75],
            stripe: [0.90, 0.88, 0.80],
            pants: [0.25, 0.22, 0.20],
            shoes: [0.10, 0.10, 0.12],
            stripe_frequency: 6.0,
        }
    }
}

impl Appearance {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut color = |lo: f64, hi: f64| -> [f64; 3] { std::array::from_fn(|_| rng.gen_range(lo..hi)) };
        let skin_tone = color(0.0, 1.0)[0];
        let skin = lerp(&Vec3::new(0.92, 0.75, 0.62), &Vec3::new(0.45, 0.30, 0.22), skin_tone);
        Self {
            skin: skin.into(),
            shirt: color(0.1, 0.9),
            stripe: color(0.1, 0.9),
            pants: color(0.08, 0.6),
            shoes: color(0.05, 0.3),
            stripe_frequency: rng.gen_range(3.0..8.0),
        }
    }

    /// Colour at canonical position `p`; smooth within every body part.
    pub fn color_at(&self, p: &Vec3, label: PartLabel) -> Vec3 {
        let skin = Vec3::from(self.skin);
        let shirt = Vec3::from(self.shirt);
        let stripe = Vec3::from(self.stripe);
        let pants = Vec3::from(self.pants);
        let shoes = Vec3::from(self.shoes);
        let shade = 1.0 - 0.08 * p.z.clamp(-0.2, 0.2) / 0.2;
        let c = match label {
            PartLabel::Face => {
                let hair = smoothstep(1.62, 1.70, p.y + 0.3 * (-p.z).max(0.0));
                lerp(&skin, &(skin * 0.35), hair)
            }
            PartLabel::LeftHand | PartLabel::RightHand => skin,
            PartLabel::Body => {
                let wave = 0.5 + 0.5 * (2.0 * PI * self.stripe_frequency * p.y).sin();
                let striped = lerp(&shirt, &stripe, 0.6 * wave);
                let sleeve = lerp(&striped, &skin, smoothstep(0.38, 0.48, p.x.abs()));
                let torso = lerp(&sleeve, &skin, smoothstep(1.33, 1.38, p.y) * (1.0 - smoothstep(0.12, 0.2, p.x.abs())));
                let legs = lerp(&shoes, &pants, smoothstep(0.12, 0.2, p.y));
                lerp(&legs, &torso, smoothstep(0.9, 0.96, p.y))
            }
        };
        (c * shade).map(|v| v.clamp(0.03, 0.97))
    }
}

/// Canonical ground-truth primitives: on their anchors, uniform opacity,
/// enlarged anchor scales, tangent-frame rotations, procedural colour.
pub fn ground_truth(assets: &AvatarAssets, appearance: &Appearance) -> GaussianSet {
    let a = &assets.anchors;
    let residual = Vec3::repeat(GT_RESIDUAL);
    let gaussians = (0..a.len())
        .map(|k| Gaussian {
            position: a.positions[k],
            opacity: GT_OPACITY,
            rotation: a.frames[k],
            scale: GaussianSet::compose_scale(&assets.base_scales[k], &residual, a.scale_limit),
            color: appearance.color_at(&a.positions[k], a.labels[k]),
        })
        .collect();
    GaussianSet {
        gaussians,
        offsets: vec![Vec3::zeros(); a.len()],
        scale_residuals: vec![residual; a.len()],
        base_scales: assets.base_scales.clone(),
        anchor_positions: a.positions.clone(),
        scale_limit: a.scale_limit,
        uv_clamped: 0,
    }
}

/// Random shape, expression and a mild pose (rotations up to `pose_std`
/// radians per axis, root kept upright).
pub fn random_params<R: Rng>(model: &ParametricBodyModel, pose_std: f64, rng: &mut R) -> PoseShapeParams {
    let mut params = PoseShapeParams::zeros(model);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for v in params.beta.iter_mut() {
        *v = 0.5 * normal.sample(rng);
    }
    for v in params.psi.iter_mut() {
        *v = 0.5 * normal.sample(rng);
    }
    let root = model.root();
    for j in 0..model.n_joints() {
        if j != root {
            let r = Vec3::from_fn(|_, _| (pose_std * normal.sample(rng)).clamp(-2.0 * pose_std, 2.0 * pose_std));
            params.set_joint_rotation(j, r);
        }
    }
    params
}

/// `n` cameras on a circle around the toy body, the first at azimuth
/// `phase` (radians from +z), all at height `TOY_CENTER.y + elevation`.
pub fn ring_cameras(n: usize, size: usize, phase: f64, elevation: f64) -> Result<Vec<Camera>> {
    let target = Vec3::from(TOY_CENTER);
    let radius = 3.0;
    let focal = size as f64 * radius / 2.1;
    (0..n)
        .map(|i| {
            let phi = phase + 2.0 * PI * i as f64 / n as f64;
            let eye = target + Vec3::new(radius * phi.sin(), elevation, radius * phi.cos());
            Camera::look_at(eye, target, Vec3::y(), focal, size, size)
        })
        .collect()
}

/// Renders the ground truth posed by `params` from every camera.
pub fn render_subject(
    id: &str,
    assets: &AvatarAssets,
    canonical: &GaussianSet,
    params: &PoseShapeParams,
    cameras: &[Camera],
    background: &Vec3,
) -> Result<SubjectDataset> {
    let posed = assets.deformer(params)?.apply(canonical);
    let observations = cameras
        .iter()
        .map(|cam| {
            Ok(Observation {
                image: rasterize(&posed.gaussians, cam, background)?.color,
                camera: cam.clone(),
                params: params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SubjectDataset::new(id, observations)
}

/// Training and held-out views of one synthetic subject.
#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub appearance: Appearance,
    pub params: PoseShapeParams,
    pub canonical: GaussianSet,
    pub train: SubjectDataset,
    pub heldout: SubjectDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub views: usize,
    pub heldout_views: usize,
    pub size: usize,
    pub pose_std: f64,
    pub background: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            views: 16,
            heldout_views: 4,
            size: 128,
            pose_std: 0.15,
            background: [1.0; 3],
        }
    }
}

/// A subject with random appearance and parameters. Held-out cameras sit
/// between the training azimuths and slightly higher.
pub fn synthetic_subject<R: Rng>(id: &str, assets: &AvatarAssets, cfg: &SyntheticConfig, rng: &mut R) -> Result<SyntheticSubject> {
    if cfg.views == 0 || cfg.size == 0 {
        return Err(Error::InvalidArgument("synthetic subject needs views and a positive size".into()));
    }
    let appearance = Appearance::random(rng);
    let params = random_params(&assets.mesh.mesh, cfg.pose_std, rng);
    let canonical = ground_truth(assets, &appearance);
    let bg = Vec3::from(cfg.background);
    let train = render_subject(id, assets, &canonical, &params, &ring_cameras(cfg.views, cfg.size, 0.0, 0.2)?, &bg)?;
    let heldout_cams = ring_cameras(cfg.heldout_views.max(1), cfg.size, PI / cfg.views as f64, 0.45)?;
    let heldout = render_subject(&format!("{id}-heldout"), assets, &canonical, &params, &heldout_cams, &bg)?;
    Ok(SyntheticSubject {
        appearance,
        params,
        canonical,
        train,
        heldout,
    })
}

/// Octahedron template of half-size `radius` centred at the origin: one
/// joint, no blendshapes, eight faces in separate UV cells.
pub fn octahedron_model(radius: f64) -> ParametricBodyModel {
    let vertices = vec![
        Vec3::new(radius, 0.0, 0.0),
        Vec3::new(-radius, 0.0, 0.0),
        Vec3::new(0.0, radius, 0.0),
        Vec3::new(0.0, -radius, 0.0),
        Vec3::new(0.0, 0.0, radius),
        Vec3::new(0.0, 0.0, -radius),
    ];
    let faces: Vec<[u32; 3]> = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    let uv_coords = (0..faces.len())
        .map(|f| {
            let (cx, cy) = ((f % 4) as f64 * 0.25, (f / 4) as f64 * 0.5);
            [[cx + 0.02, cy + 0.04], [cx + 0.23, cy + 0.04], [cx + 0.02, cy + 0.46]]
        })
        .collect();
    let nv = vertices.len();
    ParametricBodyModel {
        vertices,
        faces,
        joint_names: vec!["root".into()],
        joints_rest: vec![Vec3::zeros()],
        parents: vec![None],
        skinning_weights: vec![1.0; nv],
        shape_basis: Basis::zeros(nv, 0),
        pose_basis: Basis::zeros(nv, 0),
        expr_basis: Basis::zeros(nv, 0),
        joint_regressor: vec![1.0 / nv as f64; nv],
        uv_coords,
        part_labels: vec![PartLabel::Body; nv],
    }
}
