//! Scene representation, acceleration structure, texture and environment sampling, file I/O.

pub mod bvh;
pub mod camera;
pub mod envmap;
pub mod formats;
pub mod mesh;
pub mod scene;
pub mod texture;

pub use bvh::{Bvh, Hit, Ray};
pub use camera::Camera;
pub use envmap::EnvironmentMap;
pub use formats::{read_hdr, read_pfm, write_pfm, write_png_preview};
pub use mesh::{TriangleMesh, load_mesh};
pub use scene::{Geometry, Scene, SceneDescription};
pub use texture::{MaterialTexture, ROUGHNESS_MIN, TextureKind};
