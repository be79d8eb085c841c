//! Part-aware deformation of canonical Gaussians: skinning weight assignment,
//! blendshape warping and linear blend skinning of positions and frames.

mod knn;
mod skinning;
mod volume;

pub use knn::KdTree;
pub use skinning::{
    assign_skinning, deform, shape_warp, warp_offsets, Deformer, PoseFrame, PrimitiveSkinning, SkinningSource,
};
pub use volume::{build_skinning_volume, SkinningVolume, DEFAULT_K, DEFAULT_RESOLUTION, PADDING};
