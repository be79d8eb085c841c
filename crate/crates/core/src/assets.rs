//! Template-derived data shared by every subject: densified mesh, anchors,
//! skinning volume, per-primitive skinning and canonical base scales.

use serde::{Deserialize, Serialize};

use crate::body_model::{subdivide, DensifiedMesh, ParametricBodyModel, PoseShapeParams};
use crate::deform::{assign_skinning, build_skinning_volume, Deformer, PrimitiveSkinning, SkinningVolume};
use crate::gaussian::{assemble, decode, init_anchors, initial_scales, DecoderParams, GaussianAnchors, GaussianSet, UvFeaturePlane};
use crate::{Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetConfig {
    pub subdivision: u32,
    pub volume_resolution: usize,
    pub volume_k: usize,
}

impl Default for AssetConfig {
    fn default() -> Self {
        Self {
            subdivision: 1,
            volume_resolution: crate::deform::DEFAULT_RESOLUTION,
            volume_k: crate::deform::DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AvatarAssets {
    pub mesh: DensifiedMesh,
    pub anchors: GaussianAnchors,
    pub volume: SkinningVolume,
    pub skinning: PrimitiveSkinning,
    /// `ŝ` from the canonical anchors.
    pub base_scales: Vec<Vec3>,
}

impl AvatarAssets {
    pub fn build(model: &ParametricBodyModel, cfg: &AssetConfig) -> Result<Self> {
        model.validate()?;
        let mesh = subdivide(model, cfg.subdivision);
        let volume = build_skinning_volume(&mesh, cfg.volume_k, cfg.volume_resolution)?;
        Self::with_volume(mesh, volume)
    }

    /// Rebuilds everything except the volume, e.g. from a cached volume file.
    pub fn with_volume(mesh: DensifiedMesh, volume: SkinningVolume) -> Result<Self> {
        volume.validate()?;
        let anchors = init_anchors(&mesh)?;
        let skinning = assign_skinning(&anchors, &mesh, &volume)?;
        let base_scales = initial_scales(&anchors, &anchors.positions)?;
        Ok(Self {
            mesh,
            anchors,
            volume,
            skinning,
            base_scales,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn deformer(&self, params: &PoseShapeParams) -> Result<Deformer> {
        params.check(&self.mesh.mesh)?;
        Deformer::new(&self.mesh, &self.anchors, &self.skinning, params)
    }

    /// Decoded canonical primitives for a plane.
    pub fn canonical(&self, plane: &UvFeaturePlane, decoders: &DecoderParams) -> Result<GaussianSet> {
        let maps = decode(plane, decoders)?;
        assemble(&maps, &self.anchors, &self.base_scales)
    }

    /// Decoded primitives in a target pose.
    pub fn posed(&self, plane: &UvFeaturePlane, decoders: &DecoderParams, params: &PoseShapeParams) -> Result<GaussianSet> {
        let canonical = self.canonical(plane, decoders)?;
        Ok(self.deformer(params)?.apply(&canonical))
    }
}
