use rayon::prelude::*;

use super::SkinningVolume;
use crate::body_model::{blend_transforms, Affine, DensifiedMesh, PoseShapeParams};
use crate::gaussian::{initial_scales, AttributeGrads, GaussianAnchors, GaussianSet, PrimitiveGrads};
use crate::math::polar_rotation;
use crate::{Error, Mat3, Mat4, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkinningSource {
    Barycentric,
    Volume,
}

/// Per-primitive skinning weights, `[primitive][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveSkinning {
    pub n_joints: usize,
    pub weights: Vec<f64>,
    pub source: Vec<SkinningSource>,
}

impl PrimitiveSkinning {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_joints..(k + 1) * self.n_joints]
    }
}

/// Face and hand primitives interpolate their anchor face's vertex weights;
/// body primitives query the volume at the anchor position.
pub fn assign_skinning(anchors: &GaussianAnchors, mesh: &DensifiedMesh, volume: &SkinningVolume) -> Result<PrimitiveSkinning> {
    let nj = mesh.mesh.n_joints();
    if volume.n_joints != nj {
        return Err(Error::ShapeMismatch(format!(
            "volume has {} joints, mesh has {nj}",
            volume.n_joints
        )));
    }
    let mut weights = vec![0.0; anchors.len() * nj];
    let mut source = Vec::with_capacity(anchors.len());
    for k in 0..anchors.len() {
        let row = &mut weights[k * nj..(k + 1) * nj];
        if anchors.labels[k].is_articulated_detail() {
            for &v in &anchors.faces[k] {
                for (o, w) in row.iter_mut().zip(mesh.mesh.weight_row(v as usize)) {
                    *o += w / 3.0;
                }
            }
            source.push(SkinningSource::Barycentric);
        } else {
            row.copy_from_slice(&volume.query(&anchors.positions[k]));
            source.push(SkinningSource::Volume);
        }
    }
    Ok(PrimitiveSkinning {
        n_joints: nj,
        weights,
        source,
    })
}

/// Per-anchor blendshape displacement (shape + expression + pose correction),
/// interpolated at the anchor face's barycentre.
pub fn warp_offsets(mesh: &DensifiedMesh, anchors: &GaussianAnchors, params: &PoseShapeParams) -> Result<Vec<Vec3>> {
    let offsets = mesh.mesh.blendshape_offsets(params)?;
    Ok((0..anchors.len()).map(|k| anchors.interpolate(k, |v| offsets.total[v])).collect())
}

/// Adds the interpolated blendshape displacement to every primitive and to
/// its anchor; other attributes are untouched.
pub fn shape_warp(
    set: &GaussianSet,
    mesh: &DensifiedMesh,
    anchors: &GaussianAnchors,
    params: &PoseShapeParams,
) -> Result<GaussianSet> {
    let warp = warp_offsets(mesh, anchors, params)?;
    let mut out = set.clone();
    for k in 0..out.len() {
        out.gaussians[k].position += warp[k];
        out.anchor_positions[k] += warp[k];
    }
    Ok(out)
}

/// Per-primitive blended transform plus the rotation applied to orientations.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub affine: Vec<Affine>,
    pub rotation: Vec<Mat3>,
}

impl PoseFrame {
    pub fn new(skinning: &PrimitiveSkinning, bones: &[Mat4], translation: &Vec3) -> Result<Self> {
        if bones.len() != skinning.n_joints {
            return Err(Error::ShapeMismatch(format!(
                "{} bone transforms for {} skinning joints",
                bones.len(),
                skinning.n_joints
            )));
        }
        let results: Vec<Result<(Affine, Mat3)>> = (0..skinning.len())
            .into_par_iter()
            .map(|k| {
                let mut t = blend_transforms(skinning.row(k), bones);
                t.translation += translation;
                if !t.is_finite() {
                    return Err(Error::NonFiniteTransform(k));
                }
                let rotation = nearest_rotation(&t.linear)?;
                Ok((t, rotation))
            })
            .collect();
        let mut affine = Vec::with_capacity(results.len());
        let mut rotation = Vec::with_capacity(results.len());
        for r in results {
            let (a, q) = r?;
            affine.push(a);
            rotation.push(q);
        }
        Ok(Self { affine, rotation })
    }
}

/// Polar rotation, passing already-orthonormal matrices through unchanged so
/// rigid skinning stays exact.
fn nearest_rotation(m: &Mat3) -> Result<Mat3> {
    let gram = m.transpose() * m - Mat3::identity();
    if gram.abs().max() < 1e-12 && m.determinant() > 0.0 {
        return Ok(*m);
    }
    polar_rotation(m)
}

/// Poses a shape-warped set: blended LBS of positions, polar-projected
/// rotation update, scales re-initialised from the posed anchors.
pub fn deform(
    set: &GaussianSet,
    skinning: &PrimitiveSkinning,
    transforms: &[Mat4],
    anchors: &GaussianAnchors,
    translation: &Vec3,
) -> Result<GaussianSet> {
    if skinning.len() != set.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} skinning rows for {} primitives",
            skinning.len(),
            set.len()
        )));
    }
    let frame = PoseFrame::new(skinning, transforms, translation)?;
    let posed_anchors: Vec<Vec3> = (0..set.len()).map(|k| frame.affine[k].apply(&set.anchor_positions[k])).collect();
    let s_hat = initial_scales(anchors, &posed_anchors)?;
    Ok(apply_frame(set, &frame, posed_anchors, s_hat))
}

fn apply_frame(set: &GaussianSet, frame: &PoseFrame, posed_anchors: Vec<Vec3>, s_hat: Vec<Vec3>) -> GaussianSet {
    let mut out = set.clone();
    for k in 0..set.len() {
        let g = &mut out.gaussians[k];
        g.position = frame.affine[k].apply(&g.position);
        g.rotation = frame.rotation[k] * g.rotation;
        g.scale = GaussianSet::compose_scale(&s_hat[k], &set.scale_residuals[k], set.scale_limit);
    }
    out.anchor_positions = posed_anchors;
    out.base_scales = s_hat;
    out
}

/// Everything about a target pose that does not depend on the decoded
/// attributes, computed once and reused across decoder updates.
#[derive(Clone, Debug)]
pub struct Deformer {
    pub warp: Vec<Vec3>,
    pub frame: PoseFrame,
    pub posed_anchors: Vec<Vec3>,
    pub base_scales: Vec<Vec3>,
}

impl Deformer {
    pub fn new(
        mesh: &DensifiedMesh,
        anchors: &GaussianAnchors,
        skinning: &PrimitiveSkinning,
        params: &PoseShapeParams,
    ) -> Result<Self> {
        let warp = warp_offsets(mesh, anchors, params)?;
        let bones = mesh.mesh.bone_transforms(params)?;
        let frame = PoseFrame::new(skinning, &bones, &params.translation())?;
        let posed_anchors: Vec<Vec3> =
            (0..anchors.len()).map(|k| frame.affine[k].apply(&(anchors.positions[k] + warp[k]))).collect();
        let base_scales = initial_scales(anchors, &posed_anchors)?;
        Ok(Self {
            warp,
            frame,
            posed_anchors,
            base_scales,
        })
    }

    /// Equivalent to `deform(shape_warp(canonical))` for this pose.
    pub fn apply(&self, canonical: &GaussianSet) -> GaussianSet {
        let mut warped = canonical.clone();
        for k in 0..warped.len() {
            warped.gaussians[k].position += self.warp[k];
        }
        apply_frame(&warped, &self.frame, self.posed_anchors.clone(), self.base_scales.clone())
    }

    /// Chains gradients on the posed set back to the canonical attributes.
    pub fn backward(&self, posed: &GaussianSet, grads: &PrimitiveGrads) -> AttributeGrads {
        let n = posed.len();
        AttributeGrads {
            offset: (0..n).map(|k| self.frame.affine[k].linear.transpose() * grads.position[k]).collect(),
            opacity: grads.opacity.clone(),
            residual: (0..n).map(|k| posed.residual_grad(k, &grads.scale[k])).collect(),
            rotation: (0..n).map(|k| self.frame.rotation[k].transpose() * grads.rotation[k]).collect(),
            color: grads.color.clone(),
        }
    }
}
