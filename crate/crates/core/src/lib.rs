//! Differentiable inverse rendering of UV albedo/roughness textures and an environment map,
//! regularized by diffusion-prior samples.

pub mod adam;
pub mod archive;
pub mod brdf;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradients;
pub mod image;
pub mod math;
pub mod optimizer;
pub mod renderer;
pub mod scene_io;

pub use error::{Error, Result};
