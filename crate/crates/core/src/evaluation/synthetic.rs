//! Procedural ground-truth scenes: primitive, material patterns, environment maps, cameras and
//! reference renders for training, held-out and novel-light views.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Vec3, mix_seed};
use crate::renderer::{RenderBuffers, RenderConfig, render};
use crate::scene_io::camera::Camera;
use crate::scene_io::envmap::{EnvironmentMap, uv_to_direction};
use crate::scene_io::formats::{read_pfm, write_pfm};
use crate::scene_io::mesh::{cube, displaced_sphere, uv_sphere};
use crate::scene_io::scene::{Geometry, Scene, SceneDescription, read_cameras, write_cameras, write_scene};
use crate::scene_io::texture::{MaterialTexture, TextureKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Cube,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum AlbedoPattern {
    /// Alternating colours on a `cells × cells` UV grid.
    Checker { cells: usize, a: [f32; 3], b: [f32; 3] },
    /// Smooth value noise between two colours.
    Noise { scale: usize, a: [f32; 3], b: [f32; 3] },
    /// Linear blend from `a` at u = 0 to `b` at u = 1.
    Gradient { a: [f32; 3], b: [f32; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RoughnessPattern {
    Constant { value: f32 },
    /// Linear in v from `top` to `bottom`.
    Gradient { top: f32, bottom: f32 },
    Checker { cells: usize, a: f32, b: f32 },
}

/// Sky dome `ground..zenith` blended with elevation, times `tint`, plus a soft sun.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub zenith: f32,
    pub ground: f32,
    pub tint: [f32; 3],
    pub sun_direction: [f64; 3],
    pub sun_radiance: f32,
    /// Angular radius of the sun in degrees.
    pub sun_radius: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            zenith: 1.0,
            ground: 0.3,
            tint: [1.0, 1.0, 1.0],
            sun_direction: [0.5, 0.8, 0.4],
            sun_radiance: 6.0,
            sun_radius: 12.0,
        }
    }
}

impl EnvSpec {
    pub fn uniform(value: f32) -> EnvSpec {
        EnvSpec { zenith: value, ground: value, sun_radiance: 0.0, ..Default::default() }
    }

    pub fn build(&self, width: usize, height: usize) -> Result<EnvironmentMap> {
        let sun = Vec3::from_array(self.sun_direction).normalized();
        let cos_r = self.sun_radius.to_radians().cos();
        let mut img = Image::new(width, height, 3);
        for y in 0..height {
            for x in 0..width {
                let d = uv_to_direction([(x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64]);
                let t = 0.5 * (d.y + 1.0);
                let sky = self.ground as f64 + (self.zenith - self.ground) as f64 * t;
                let c = d.dot(sun);
                let disc = if c > cos_r { ((c - cos_r) / (1.0 - cos_r)).sqrt() } else { 0.0 };
                let v = sky + self.sun_radiance as f64 * disc;
                for k in 0..3 {
                    img.data[(y * width + x) * 3 + k] = (v * self.tint[k] as f64) as f32;
                }
            }
        }
        EnvironmentMap::new(img)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub primitive: Primitive,
    pub albedo: AlbedoPattern,
    pub roughness: RoughnessPattern,
    pub env: EnvSpec,
    pub novel_env: EnvSpec,
    pub f0: f64,
    pub specular: bool,
    pub texture_resolution: usize,
    pub env_resolution: [usize; 2],
    pub image_size: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub camera_distance: f64,
    pub fov_deg: f64,
    pub spp: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            primitive: Primitive::Sphere,
            albedo: AlbedoPattern::Checker { cells: 8, a: [0.6, 0.25, 0.15], b: [0.15, 0.35, 0.6] },
            roughness: RoughnessPattern::Gradient { top: 0.2, bottom: 0.8 },
            env: EnvSpec::default(),
            novel_env: EnvSpec {
                zenith: 0.8,
                ground: 0.4,
                sun_direction: [-0.6, 0.5, -0.6],
                sun_radiance: 4.0,
                sun_radius: 18.0,
                ..Default::default()
            },
            f0: crate::scene_io::scene::DEFAULT_F0,
            specular: true,
            texture_resolution: 256,
            env_resolution: [64, 32],
            image_size: 64,
            train_views: 8,
            test_views: 4,
            camera_distance: 3.2,
            fov_deg: 40.0,
            spp: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Checker sphere under warm light: the scene of the end-to-end benchmark.
    pub fn checker_sphere() -> SyntheticSpec {
        SyntheticSpec { env: EnvSpec { tint: [1.0, 0.85, 0.6], ..Default::default() }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.texture_resolution == 0 || self.env_resolution.contains(&0) || self.image_size == 0 {
            return Err(Error::InvalidArgument("resolutions must be positive".into()));
        }
        if self.train_views == 0 || self.spp == 0 {
            return Err(Error::InvalidArgument("need at least one training view and one sample per pixel".into()));
        }
        match self.albedo {
            AlbedoPattern::Checker { cells: 0, .. } | AlbedoPattern::Noise { scale: 0, .. } => {
                return Err(Error::InvalidArgument("pattern cell count must be positive".into()));
            }
            _ => {}
        }
        if let RoughnessPattern::Checker { cells: 0, .. } = self.roughness {
            return Err(Error::InvalidArgument("pattern cell count must be positive".into()));
        }
        Ok(())
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a `scale × scale` lattice, periodic in u.
fn value_noise(scale: usize, seed: u64) -> impl Fn(f32, f32) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<f32> = (0..scale * (scale + 1)).map(|_| rng.r#gen()).collect();
    move |u, v| {
        let (fu, fv) = (u * scale as f32, v * scale as f32);
        let (i, j) = (fu.floor() as usize, (fv.floor() as usize).min(scale - 1));
        let (tu, tv) = (smoothstep(fu - i as f32), smoothstep(fv - j as f32));
        let at = |i: usize, j: usize| lattice[j * scale + i % scale];
        let top = at(i, j) + (at(i + 1, j) - at(i, j)) * tu;
        let bottom = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * tu;
        top + (bottom - top) * tv
    }
}

pub fn albedo_texture(pattern: &AlbedoPattern, res: usize, seed: u64) -> Result<MaterialTexture> {
    let mut img = Image::new(res, res, 3);
    let noise = match pattern {
        AlbedoPattern::Noise { scale, .. } => Some(value_noise(*scale, seed)),
        _ => None,
    };
    for y in 0..res {
        for x in 0..res {
            let (u, v) = ((x as f32 + 0.5) / res as f32, (y as f32 + 0.5) / res as f32);
            let c = match pattern {
                AlbedoPattern::Checker { cells, a, b } => {
                    let (i, j) = (x * cells / res, y * cells / res);
                    if (i + j) % 2 == 0 { *a } else { *b }
                }
                AlbedoPattern::Noise { a, b, .. } => lerp3(*a, *b, noise.as_ref().expect("noise is built")(u, v)),
                AlbedoPattern::Gradient { a, b } => lerp3(*a, *b, u),
            };
            img.pixel_mut(x, y).copy_from_slice(&c);
        }
    }
    MaterialTexture::from_image(TextureKind::Albedo, img)
}

pub fn roughness_texture(pattern: &RoughnessPattern, res: usize) -> Result<MaterialTexture> {
    let mut img = Image::new(res, res, 1);
    for y in 0..res {
        for x in 0..res {
            let v = (y as f32 + 0.5) / res as f32;
            img.data[y * res + x] = match *pattern {
                RoughnessPattern::Constant { value } => value,
                RoughnessPattern::Gradient { top, bottom } => top + (bottom - top) * v,
                RoughnessPattern::Checker { cells, a, b } => {
                    if (x * cells / res + y * cells / res) % 2 == 0 { a } else { b }
                }
            };
        }
    }
    MaterialTexture::from_image(TextureKind::Roughness, img)
}

pub fn primitive_mesh(p: Primitive) -> crate::scene_io::mesh::TriangleMesh {
    match p {
        Primitive::Sphere => uv_sphere(1.0, 48, 96),
        Primitive::Cube => cube(0.7),
        Primitive::Blob => displaced_sphere(48, 96, |theta, phi| {
            1.0 + 0.12 * (3.0 * phi).sin() * theta.sin() + 0.08 * (4.0 * theta).cos()
        }),
    }
}

/// Cameras on a spiral around the origin; `offset` shifts the spiral so held-out views fall
/// between training views.
pub fn orbit_cameras(n: usize, offset: f64, spec: &SyntheticSpec) -> Vec<Camera> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5 + offset) / n as f64;
            let elevation = (-0.25 + 0.85 * t).clamp(-0.9, 0.9);
            let az = golden * (i as f64 + offset) * 2.0 + offset;
            let r = (1.0 - elevation * elevation).sqrt();
            let eye = Vec3::new(r * az.sin(), elevation, r * az.cos()) * spec.camera_distance;
            Camera::look_at(eye, Vec3::ZERO, Vec3::Y, spec.fov_deg, spec.image_size, spec.image_size)
        })
        .collect()
}

/// Ground truth for one synthetic object.
#[derive(Clone, Debug)]
pub struct GtBundle {
    pub spec: SyntheticSpec,
    pub scene: Scene,
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
    pub train: Vec<RenderBuffers>,
    pub test: Vec<RenderBuffers>,
    pub novel_env: EnvironmentMap,
    /// Held-out cameras rendered under `novel_env`.
    pub novel: Vec<RenderBuffers>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Novel,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Novel => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Novel => "novel",
        }
    }
}

/// Render settings used for view `index` of `split`.
pub fn render_config_for(spec: &SyntheticSpec, split: Split, index: usize) -> RenderConfig {
    RenderConfig { spp: spec.spp, seed: mix_seed(mix_seed(spec.seed, split.tag()), index as u64), ..Default::default() }
}

/// The ground-truth scene of `spec`, without rendering anything.
pub fn synthetic_scene(spec: &SyntheticSpec) -> Result<Scene> {
    spec.validate()?;
    let geometry = Geometry::new(primitive_mesh(spec.primitive))?;
    let [ew, eh] = spec.env_resolution;
    let mut scene = Scene::new(
        geometry,
        albedo_texture(&spec.albedo, spec.texture_resolution, spec.seed)?,
        roughness_texture(&spec.roughness, spec.texture_resolution)?,
        spec.env.build(ew, eh)?,
    )?;
    scene.f0 = spec.f0;
    scene.specular = spec.specular;
    Ok(scene)
}

pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> Result<GtBundle> {
    let scene = synthetic_scene(spec)?;
    let [ew, eh] = spec.env_resolution;
    let novel_env = spec.novel_env.build(ew, eh)?;
    let train_cameras = orbit_cameras(spec.train_views, 0.0, spec);
    let test_cameras = orbit_cameras(spec.test_views, 0.37, spec);
    let render_all = |scene: &Scene, cams: &[Camera], split| -> Result<Vec<RenderBuffers>> {
        cams.iter().enumerate().map(|(i, c)| render(scene, c, &render_config_for(spec, split, i))).collect()
    };
    let train = render_all(&scene, &train_cameras, Split::Train)?;
    let test = render_all(&scene, &test_cameras, Split::Test)?;
    let novel = render_all(&scene.with_env(novel_env.clone()), &test_cameras, Split::Novel)?;
    Ok(GtBundle { spec: spec.clone(), scene, train_cameras, test_cameras, train, test, novel_env, novel })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub spec: SyntheticSpec,
    pub scene: PathBuf,
    pub test_cameras: PathBuf,
    pub novel_env: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub novel: Vec<PathBuf>,
    pub previews: Vec<PathBuf>,
}

impl GtBundle {
    /// Writes the scene, cameras, environment maps, per-view buffers, previews and a manifest.
    pub fn write(&self, dir: &Path) -> Result<BundleManifest> {
        let scene_path = write_scene(&self.scene, &self.train_cameras, &dir.join("scene"))?;
        write_cameras(&self.test_cameras, &dir.join("test_cameras.json"))?;
        write_pfm(self.novel_env.radiance(), &dir.join("novel_env.pfm"))?;
        let mut previews = Vec::new();
        let mut write_split = |bufs: &[RenderBuffers], split: Split| -> Result<Vec<PathBuf>> {
            bufs.iter()
                .enumerate()
                .map(|(i, b)| {
                    let rel = PathBuf::from(split.name()).join(format!("{i:03}"));
                    b.write(&dir.join(&rel))?;
                    previews.push(rel.join("rgb.png"));
                    Ok(rel)
                })
                .collect()
        };
        let train = write_split(&self.train, Split::Train)?;
        let test = write_split(&self.test, Split::Test)?;
        let novel = write_split(&self.novel, Split::Novel)?;
        let manifest = BundleManifest {
            spec: self.spec.clone(),
            scene: scene_path.strip_prefix(dir).unwrap_or(&scene_path).to_path_buf(),
            test_cameras: "test_cameras.json".into(),
            novel_env: "novel_env.pfm".into(),
            train,
            test,
            novel,
            previews,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<GtBundle> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        let (desc, base) = SceneDescription::read(&dir.join(&m.scene))?;
        let scene = desc.load(&base)?;
        let train_cameras = desc.load_cameras(&base)?;
        let test_cameras = read_cameras(&dir.join(&m.test_cameras))?;
        let novel_env = EnvironmentMap::new(read_pfm(&dir.join(&m.novel_env))?)?;
        let load = |rels: &[PathBuf]| rels.iter().map(|r| RenderBuffers::read(&dir.join(r))).collect::<Result<Vec<_>>>();
        let bundle = GtBundle {
            spec: m.spec.clone(),
            scene,
            train: load(&m.train)?,
            test: load(&m.test)?,
            novel: load(&m.novel)?,
            train_cameras,
            test_cameras,
            novel_env,
        };
        if bundle.train.len() != bundle.train_cameras.len()
            || bundle.test.len() != bundle.test_cameras.len()
            || bundle.novel.len() != bundle.test_cameras.len()
        {
            return Err(Error::InvalidArgument(format!("{} lists inconsistent view counts", path.display())));
        }
        Ok(bundle)
    }

    pub fn geometry(&self) -> Arc<Geometry> {
        self.scene.geometry.clone()
    }
}
