//! UV feature planes, anchors on the densified template, decoders and the
//! assembly of decoded maps into Gaussian primitives.

mod anchors;
mod assemble;
mod decoder;
mod plane;

pub use anchors::{
    init_anchors, init_anchors_on, initial_scales, tangent_frame, GaussianAnchors, ANCHOR_BARY, MIN_SCALE,
    OFFSET_LIMIT_FACTOR, SCALE_LIMIT_FACTOR,
};
pub use assemble::{
    activate, assemble, assemble_backward, scale_residual, AttributeGrads, Gaussian, GaussianSet, PrimitiveGrads,
    RawAttributes,
    LOGIT_LIMIT, LOG_SCALE_LIMIT,
};
pub use decoder::{
    channel, decode, decode_backward, decode_cached, AttributeMaps, DecodeCache, DecoderConfig, DecoderGrads,
    DecoderParams, APPEARANCE_CHANNELS, GEOMETRY_CHANNELS,
};
pub use plane::{BilinearTap, UvFeaturePlane};
