//! UV-anchored 3D Gaussian avatars.
//!
//! A parametric body template provides a shared UV layout. A learnable
//! feature plane in that layout is decoded into per-primitive Gaussian
//! attributes, deformed to a target pose/shape/expression with part-aware
//! skinning, and rendered with a tile-parallel differentiable splatting
//! rasterizer. Planes are fitted to multi-view images and jointly learned with
//! a v-parameterized denoiser, and can be edited directly in UV space.

pub mod assets;
pub mod bench;
pub mod body_model;
pub mod config;
pub mod dataset;
pub mod deform;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod io;
pub mod math;
pub mod nn;
pub mod optim;
pub mod render;
pub mod synth;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;
