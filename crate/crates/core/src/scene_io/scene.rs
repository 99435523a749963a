//! A renderable scene and its on-disk description.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene_io::bvh::Bvh;
use crate::scene_io::camera::Camera;
use crate::scene_io::envmap::EnvironmentMap;
use crate::scene_io::formats::{read_hdr_image, read_pfm, write_pfm};
use crate::scene_io::mesh::{TriangleMesh, load_mesh};
use crate::scene_io::texture::{MaterialTexture, TextureKind};

pub const DEFAULT_F0: f64 = 0.04;

/// Immutable geometry shared by every copy of a scene.
#[derive(Debug)]
pub struct Geometry {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    /// Ray offset: 1e-4 of the bounding-box diagonal.
    pub epsilon: f64,
}

impl Geometry {
    pub fn new(mesh: TriangleMesh) -> Result<Arc<Geometry>> {
        mesh.validate()?;
        let bvh = Bvh::build(&mesh);
        let (lo, hi) = mesh.bounds();
        let epsilon = 1e-4 * (hi - lo).length().max(1e-12);
        Ok(Arc::new(Geometry { mesh, bvh, epsilon }))
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub geometry: Arc<Geometry>,
    pub albedo: MaterialTexture,
    pub roughness: MaterialTexture,
    pub env: EnvironmentMap,
    /// Schlick reflectance at normal incidence.
    pub f0: f64,
    /// False renders a purely Lambertian object.
    pub specular: bool,
}

impl Scene {
    pub fn new(
        geometry: Arc<Geometry>,
        albedo: MaterialTexture,
        roughness: MaterialTexture,
        env: EnvironmentMap,
    ) -> Result<Scene> {
        if albedo.kind != TextureKind::Albedo || roughness.kind != TextureKind::Roughness {
            return Err(Error::InvalidArgument("albedo/roughness texture kinds swapped".into()));
        }
        Ok(Scene { geometry, albedo, roughness, env, f0: DEFAULT_F0, specular: true })
    }

    pub fn with_env(&self, env: EnvironmentMap) -> Scene {
        Scene { env, ..self.clone() }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.geometry.mesh
    }
}

/// Either a file path or an inline constant, for textures and environment maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    File(PathBuf),
    Constant(Vec<f32>),
}

/// JSON scene description. Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub mesh: PathBuf,
    pub albedo: ImageSource,
    pub roughness: ImageSource,
    pub env: ImageSource,
    #[serde(default = "default_f0")]
    pub f0: f64,
    #[serde(default = "default_true")]
    pub specular: bool,
    /// Resolution used for constant textures.
    #[serde(default = "default_texture_res")]
    pub texture_resolution: usize,
    /// Resolution used for a constant environment map, `[width, height]`.
    #[serde(default = "default_env_res")]
    pub env_resolution: [usize; 2],
    /// Camera list (JSON array of cameras).
    #[serde(default)]
    pub cameras: Option<PathBuf>,
}

fn default_f0() -> f64 {
    DEFAULT_F0
}

fn default_true() -> bool {
    true
}

fn default_texture_res() -> usize {
    256
}

fn default_env_res() -> [usize; 2] {
    [64, 32]
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

impl SceneDescription {
    pub fn read(path: &Path) -> Result<(SceneDescription, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let desc: SceneDescription = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((desc, base))
    }

    pub fn load(&self, base: &Path) -> Result<Scene> {
        let mesh_path = resolve(base, &self.mesh);
        if !mesh_path.exists() {
            return Err(Error::Io {
                path: mesh_path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "mesh file not found"),
            });
        }
        let geometry = Geometry::new(load_mesh(&mesh_path)?)?;
        let n = self.texture_resolution;
        let texture = |src: &ImageSource, kind: TextureKind| -> Result<MaterialTexture> {
            match src {
                ImageSource::Constant(v) => MaterialTexture::constant(kind, n, n, v),
                ImageSource::File(p) => MaterialTexture::from_image(kind, read_pfm(&resolve(base, p))?),
            }
        };
        let albedo = texture(&self.albedo, TextureKind::Albedo)?;
        let roughness = texture(&self.roughness, TextureKind::Roughness)?;
        let env = match &self.env {
            ImageSource::Constant(v) if v.len() == 3 => {
                EnvironmentMap::constant(self.env_resolution[0], self.env_resolution[1], [v[0], v[1], v[2]])
            }
            ImageSource::Constant(_) => {
                return Err(Error::InvalidArgument("constant environment needs 3 values".into()));
            }
            ImageSource::File(p) => EnvironmentMap::new(read_hdr_image(&resolve(base, p))?)?,
        };
        let mut scene = Scene::new(geometry, albedo, roughness, env)?;
        scene.f0 = self.f0;
        scene.specular = self.specular;
        Ok(scene)
    }

    pub fn load_cameras(&self, base: &Path) -> Result<Vec<Camera>> {
        match &self.cameras {
            None => Ok(Vec::new()),
            Some(p) => read_cameras(&resolve(base, p)),
        }
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cams: Vec<Camera> = serde_json::from_str(&text)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cameras)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes mesh, textures, environment and description into `dir`, returning the description path.
pub fn write_scene(scene: &Scene, cameras: &[Camera], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.mesh().write_obj(&dir.join("mesh.obj"))?;
    write_pfm(&scene.albedo.image, &dir.join("albedo.pfm"))?;
    write_pfm(&scene.roughness.image, &dir.join("roughness.pfm"))?;
    write_pfm(scene.env.radiance(), &dir.join("env.pfm"))?;
    write_cameras(cameras, &dir.join("cameras.json"))?;
    let desc = SceneDescription {
        mesh: "mesh.obj".into(),
        albedo: ImageSource::File("albedo.pfm".into()),
        roughness: ImageSource::File("roughness.pfm".into()),
        env: ImageSource::File("env.pfm".into()),
        f0: scene.f0,
        specular: scene.specular,
        texture_resolution: scene.albedo.width(),
        env_resolution: [scene.env.width(), scene.env.height()],
        cameras: Some("cameras.json".into()),
    };
    let path = dir.join("scene.json");
    std::fs::write(&path, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads an RGB image used as an observation (PFM only).
pub fn read_observation(path: &Path) -> Result<Image> {
    let img = read_pfm(path)?;
    if img.channels != 3 {
        return Err(Error::InvalidImage(format!("{} is not an RGB image", path.display())));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::scene_io::mesh::uv_sphere;

    #[test]
    fn epsilon_scales_with_bounds() {
        let g = Geometry::new(uv_sphere(2.0, 16, 32)).unwrap();
        assert!((g.epsilon - 1e-4 * (4.0f64 * 4.0 * 3.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn description_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let geometry = Geometry::new(uv_sphere(1.0, 8, 16)).unwrap();
        let albedo = MaterialTexture::constant(TextureKind::Albedo, 8, 8, &[0.3, 0.4, 0.5]).unwrap();
        let rough = MaterialTexture::constant(TextureKind::Roughness, 8, 8, &[0.5]).unwrap();
        let scene = Scene::new(geometry, albedo, rough, EnvironmentMap::constant(8, 4, [1.0; 3])).unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::Y, 40.0, 8, 8);
        let path = write_scene(&scene, &[cam.clone()], dir.path()).unwrap();
        let (desc, base) = SceneDescription::read(&path).unwrap();
        let back = desc.load(&base).unwrap();
        assert_eq!(back.albedo, scene.albedo);
        assert_eq!(desc.load_cameras(&base).unwrap(), vec![cam]);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"mesh":"mesh.obj","albedo":[0.5,0.5,0.5],"roughness":[0.5],"env":[1,1,1],"sppp":3}"#)
            .unwrap();
        assert!(SceneDescription::read(&bad).is_err());
    }

    #[test]
    fn missing_mesh_names_path() {
        let desc = SceneDescription {
            mesh: "/nonexistent/thing.obj".into(),
            albedo: ImageSource::Constant(vec![0.5; 3]),
            roughness: ImageSource::Constant(vec![0.5]),
            env: ImageSource::Constant(vec![1.0; 3]),
            f0: DEFAULT_F0,
            specular: true,
            texture_resolution: 4,
            env_resolution: [8, 4],
            cameras: None,
        };
        let err = desc.load(Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/thing.obj"), "{err}");
    }
}
