//! Two-stage inverse rendering: a coarse stage against cached prior samples, then a fine stage
//! against samples re-generated with guidance from the coarse estimate.

pub mod loss;
pub mod prior;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::archive::TensorArchive;
use crate::diffusion::{GuidanceConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::gradients::{ParamGradients, backward, uv_footprint};
use crate::image::{Image, Mask};
use crate::math::mix_seed;
use crate::renderer::{RenderBuffers, RenderConfig, render, render_raw};
use crate::scene_io::camera::Camera;
use crate::scene_io::envmap::EnvironmentMap;
use crate::scene_io::formats::{read_pfm, write_pfm};
use crate::scene_io::scene::{Geometry, Scene};
use crate::scene_io::texture::{MaterialTexture, TextureKind};

pub use loss::{CoarseLoss, LossTerms, LossWeights, SmoothnessInput, SsiFit, loss_coarse, smoothness_loss, ssi_align};
pub use prior::{GuidanceTargets, PriorModel, PriorSamples, Priors, draw_guided_samples, draw_samples};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub spp: usize,
    pub texture_resolution: usize,
    pub env_resolution: [usize; 2],
    pub lr_texture: f64,
    pub lr_env: f64,
    /// Learning rates decay linearly over both stages to this fraction of their initial value.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub guidance: GuidanceConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Samples per pixel of the renders used for guidance targets and loss evaluation.
    pub eval_spp: usize,
    /// Where a state dump is written when the loss diverges.
    pub dump_dir: Option<PathBuf>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::desk()
    }
}

impl OptimConfig {
    pub fn desk() -> OptimConfig {
        OptimConfig {
            stage1_iterations: 2000,
            stage2_iterations: 1500,
            spp: 16,
            texture_resolution: 256,
            env_resolution: [64, 32],
            lr_texture: 1e-2,
            lr_env: 5e-3,
            lr_final_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            guidance: GuidanceConfig::default(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            eval_spp: 64,
            dump_dir: None,
        }
    }

    pub fn paper() -> OptimConfig {
        OptimConfig {
            stage1_iterations: 20_000,
            stage2_iterations: 15_000,
            spp: 144,
            texture_resolution: 2048,
            env_resolution: [512, 256],
            eval_spp: 144,
            ..OptimConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.guidance.validate()?;
        if self.spp == 0 || self.eval_spp == 0 {
            return Err(Error::InvalidArgument("spp must be at least 1".into()));
        }
        if self.texture_resolution == 0 || self.env_resolution.contains(&0) {
            return Err(Error::InvalidArgument("texture and environment resolutions must be positive".into()));
        }
        if !(self.lr_texture >= 0.0 && self.lr_env >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::InvalidArgument("lr_final_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    fn render_config(&self, spp: usize, seed: u64) -> RenderConfig {
        RenderConfig { spp, seed, ..Default::default() }
    }
}

/// One posed observation.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub observed: Image,
    pub mask: Mask,
}

impl View {
    pub fn new(camera: Camera, observed: Image, mask: Mask) -> Result<View> {
        if observed.width != camera.width || observed.height != camera.height || observed.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "observation is {}x{}x{}, camera is {}x{}",
                observed.width, observed.height, observed.channels, camera.width, camera.height
            )));
        }
        mask.check_matches(&observed, "view mask")?;
        Ok(View { camera, observed, mask })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: u64,
    pub view: usize,
    pub terms: LossTerms,
}

/// First and second moments for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    fn zeros(n: usize) -> Moments {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    /// Current estimate: known geometry with the optimized textures and environment.
    pub scene: Scene,
    pub albedo_moments: Moments,
    pub roughness_moments: Moments,
    pub env_moments: Moments,
    pub step: u64,
    pub stage: Stage,
    /// Prior samples per view for the current stage.
    pub samples: Vec<PriorSamples>,
    pub albedo_footprint: Mask,
    pub roughness_footprint: Mask,
    pub history: Vec<LossRecord>,
}

fn luminance(p: &[f32]) -> f64 {
    0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
}

/// Mean luminance of the observations over their masks.
pub fn mean_observed_luminance(views: &[View]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in views {
        for p in 0..v.observed.pixel_count() {
            if v.mask.data[p] {
                sum += luminance(&v.observed.data[p * 3..p * 3 + 3]);
                n += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

impl OptimState {
    /// Gray albedo 0.5, roughness 0.5 and a uniform environment at the mean observed luminance.
    pub fn initial(geometry: Arc<Geometry>, views: &[View], cfg: &OptimConfig) -> Result<OptimState> {
        cfg.validate()?;
        let r = cfg.texture_resolution;
        let [ew, eh] = cfg.env_resolution;
        let gray = mean_observed_luminance(views) as f32;
        let scene = Scene::new(
            geometry,
            MaterialTexture::constant(TextureKind::Albedo, r, r, &[0.5, 0.5, 0.5])?,
            MaterialTexture::constant(TextureKind::Roughness, r, r, &[0.5])?,
            EnvironmentMap::constant(ew, eh, [gray; 3]),
        )?;
        OptimState::from_scene(scene, views, cfg)
    }

    /// Starts from arbitrary textures and environment, with fresh moments.
    pub fn from_scene(scene: Scene, views: &[View], cfg: &OptimConfig) -> Result<OptimState> {
        let (albedo_footprint, roughness_footprint) = footprints(&scene, views, cfg)?;
        Ok(OptimState {
            albedo_moments: Moments::zeros(scene.albedo.image.data.len()),
            roughness_moments: Moments::zeros(scene.roughness.image.data.len()),
            env_moments: Moments::zeros(scene.env.radiance().data.len()),
            scene,
            step: 0,
            stage: Stage::Coarse,
            samples: Vec::new(),
            albedo_footprint,
            roughness_footprint,
            history: Vec::new(),
        })
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut text = String::from("stage,step,view,image,albedo,specular,smooth,total\n");
        for r in &self.history {
            let t = &r.terms;
            let stage = if r.stage == Stage::Coarse { "coarse" } else { "fine" };
            text += &format!(
                "{stage},{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.step, r.view, t.image, t.albedo, t.specular, t.smooth, t.total
            );
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Writes textures and environment as PFM, a JSON sidecar and the moments and cached
    /// samples as a tensor archive.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pfm(&self.scene.albedo.image, &dir.join("albedo.pfm"))?;
        write_pfm(&self.scene.roughness.image, &dir.join("roughness.pfm"))?;
        write_pfm(self.scene.env.radiance(), &dir.join("env.pfm"))?;
        write_pfm(&self.albedo_footprint.to_image(), &dir.join("albedo_footprint.pfm"))?;
        write_pfm(&self.roughness_footprint.to_image(), &dir.join("roughness_footprint.pfm"))?;
        let mut ar = TensorArchive::new();
        for (name, m) in [("albedo", &self.albedo_moments), ("roughness", &self.roughness_moments), ("env", &self.env_moments)] {
            ar.push(&format!("{name}.m"), &[m.m.len()], m.m.clone())?;
            ar.push(&format!("{name}.v"), &[m.v.len()], m.v.clone())?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            for (name, img) in [("albedo", &s.albedo), ("specular", &s.specular)] {
                if let Some(img) = img {
                    ar.push(&format!("sample.{i}.{name}"), &[img.height, img.width, img.channels], img.data.clone())?;
                }
            }
        }
        ar.write(&dir.join("moments.bin"))?;
        let sidecar = StateSidecar {
            version: 1,
            step: self.step,
            stage: self.stage,
            views: self.samples.len(),
            f0: self.scene.f0,
            specular: self.scene.specular,
            history: self.history.clone(),
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        self.write_loss_csv(&dir.join("loss.csv"))
    }

    pub fn load(dir: &Path, geometry: Arc<Geometry>) -> Result<OptimState> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sc: StateSidecar = serde_json::from_str(&text)?;
        if sc.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported state version {}", sc.version)));
        }
        let albedo = MaterialTexture::from_image(TextureKind::Albedo, read_pfm(&dir.join("albedo.pfm"))?)?;
        let roughness = MaterialTexture::from_image(TextureKind::Roughness, read_pfm(&dir.join("roughness.pfm"))?)?;
        let env = EnvironmentMap::new(read_pfm(&dir.join("env.pfm"))?)?;
        let mut scene = Scene::new(geometry, albedo, roughness, env)?;
        scene.f0 = sc.f0;
        scene.specular = sc.specular;
        let ar = TensorArchive::read(&dir.join("moments.bin"))?;
        let moments = |name: &str, n: usize| -> Result<Moments> {
            Ok(Moments {
                m: ar.expect(&format!("{name}.m"), &[n])?.data.clone(),
                v: ar.expect(&format!("{name}.v"), &[n])?.data.clone(),
            })
        };
        let samples = (0..sc.views)
            .map(|i| {
                let get = |name: &str| {
                    ar.get(&format!("sample.{i}.{name}")).map(|t| {
                        Image::from_data(t.shape[1], t.shape[0], t.shape[2], t.data.clone())
                            .map_err(|e| Error::Checkpoint(e.to_string()))
                    })
                };
                Ok(PriorSamples { albedo: get("albedo").transpose()?, specular: get("specular").transpose()? })
            })
            .collect::<Result<Vec<_>>>()?;
        let footprint = |name: &str| read_pfm(&dir.join(name)).map(|img| Mask::from_image(&img));
        Ok(OptimState {
            albedo_moments: moments("albedo", scene.albedo.image.data.len())?,
            roughness_moments: moments("roughness", scene.roughness.image.data.len())?,
            env_moments: moments("env", scene.env.radiance().data.len())?,
            albedo_footprint: footprint("albedo_footprint.pfm")?,
            roughness_footprint: footprint("roughness_footprint.pfm")?,
            scene,
            step: sc.step,
            stage: sc.stage,
            samples,
            history: sc.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateSidecar {
    version: u32,
    step: u64,
    stage: Stage,
    views: usize,
    f0: f64,
    specular: bool,
    history: Vec<LossRecord>,
}

/// Texels reached by any view at `eval_spp`.
fn footprints(scene: &Scene, views: &[View], cfg: &OptimConfig) -> Result<(Mask, Mask)> {
    let mut a = Mask::new(scene.albedo.width(), scene.albedo.height(), false);
    let mut r = Mask::new(scene.roughness.width(), scene.roughness.height(), false);
    for (i, v) in views.iter().enumerate() {
        let (_, tape) = render_raw(scene, scene, &v.camera, &cfg.render_config(cfg.eval_spp, mix_seed(cfg.seed, i as u64)), true)?;
        uv_footprint(scene, &tape.expect("tape was requested"), &mut a, &mut r);
    }
    Ok((a, r))
}

/// Bias-corrected Adam on every parameter block, then the range clamps.
pub fn adam_step(state: &mut OptimState, grads: &ParamGradients, texture: &AdamConfig, env: &AdamConfig) -> Result<()> {
    let s = &mut state.scene;
    if grads.d_albedo.data.len() != s.albedo.image.data.len()
        || grads.d_roughness.data.len() != s.roughness.image.data.len()
        || grads.d_env.data.len() != s.env.radiance().data.len()
    {
        return Err(Error::ShapeMismatch("gradients do not match the parameter shapes".into()));
    }
    state.step += 1;
    let step = state.step;
    let (am, rm) = (&mut state.albedo_moments, &mut state.roughness_moments);
    texture.update(step, &mut s.albedo.image.data, &grads.d_albedo.data, &mut am.m, &mut am.v);
    texture.update(step, &mut s.roughness.image.data, &grads.d_roughness.data, &mut rm.m, &mut rm.v);
    s.albedo.clamp();
    s.roughness.clamp();
    let em = &mut state.env_moments;
    s.env.update(|img| env.update(step, &mut img.data, &grads.d_env.data, &mut em.m, &mut em.v));
    Ok(())
}

/// Loss and parameter gradients of one view under the current state.
fn view_loss(state: &OptimState, view: &View, samples: Option<&PriorSamples>, cfg: &OptimConfig, seed: u64, spp: usize)
-> Result<(CoarseLoss, ParamGradients)> {
    let scene = &state.scene;
    let (raw, tape) = render_raw(scene, scene, &view.camera, &cfg.render_config(spp, seed), true)?;
    let buffers = raw.to_buffers();
    let mask = view.mask.intersect(&buffers.mask);
    let smooth = SmoothnessInput {
        albedo: &scene.albedo.image,
        roughness: &scene.roughness.image,
        albedo_footprint: Some(&state.albedo_footprint),
        roughness_footprint: Some(&state.roughness_footprint),
    };
    let loss = loss_coarse(
        &buffers,
        &view.observed,
        samples.and_then(|s| s.albedo.as_ref()),
        samples.and_then(|s| s.specular.as_ref()),
        &cfg.weights,
        &mask,
        Some(smooth),
    )?;
    let mut grads = backward(scene, &tape.expect("tape was requested"), &loss.pixel_grads);
    if let Some(g) = &loss.d_albedo {
        grads.d_albedo.add_scaled(g, 1.0);
    }
    if let Some(g) = &loss.d_roughness {
        grads.d_roughness.add_scaled(g, 1.0);
    }
    Ok((loss, grads))
}

/// Mean total loss over all views at `eval_spp` with a fixed seed, against the cached samples.
pub fn evaluate_loss(state: &OptimState, views: &[View], cfg: &OptimConfig) -> Result<f64> {
    let mut sum = 0.0;
    for (i, v) in views.iter().enumerate() {
        let (l, _) = view_loss(state, v, state.samples.get(i), cfg, mix_seed(cfg.seed ^ 0xE7A1, i as u64), cfg.eval_spp)?;
        sum += l.terms.total;
    }
    Ok(sum / views.len().max(1) as f64)
}

fn run_iterations(state: &mut OptimState, views: &[View], cfg: &OptimConfig, iterations: usize) -> Result<()> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("at least one view is required".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    for it in 0..iterations {
        if it % views.len() == 0 {
            order = (0..views.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x0DE5, state.step)));
        }
        let v = order[it % views.len()];
        let seed = mix_seed(cfg.seed, state.step);
        let (loss, grads) = view_loss(state, &views[v], state.samples.get(v), cfg, seed, cfg.spp)?;
        if !loss.terms.total.is_finite() || !grads.is_finite() {
            let step = state.step as usize;
            if let Some(dir) = &cfg.dump_dir {
                let dump = dir.join(format!("diverged-{step}"));
                match state.save(&dump) {
                    Ok(()) => log::error!("loss diverged at step {step}; state dumped to {}", dump.display()),
                    Err(e) => log::error!("loss diverged at step {step}; dumping state failed: {e}"),
                }
            }
            return Err(Error::Diverged { step });
        }
        state.history.push(LossRecord { stage: state.stage, step: state.step, view: v, terms: loss.terms });
        let total = (cfg.stage1_iterations + cfg.stage2_iterations).saturating_sub(1).max(1);
        let progress = (state.step as f64 / total as f64).min(1.0);
        let decay = 1.0 - (1.0 - cfg.lr_final_fraction) * progress;
        adam_step(state, &grads, &cfg.adam(cfg.lr_texture * decay), &cfg.adam(cfg.lr_env * decay))?;
        if (it + 1) % 100 == 0 || it + 1 == iterations {
            log::info!("{:?} step {} loss {:.5}", state.stage, state.step, loss.terms.total);
        }
    }
    Ok(())
}

/// Coarse stage: draws one prior sample per view, caches it and minimizes the loss against it.
pub fn stage1_optimize(state: &mut OptimState, views: &[View], priors: &Priors, cfg: &OptimConfig) -> Result<()> {
    cfg.validate()?;
    if state.stage != Stage::Coarse {
        return Err(Error::InvalidArgument("stage 1 runs only on a coarse state".into()));
    }
    let schedule = cfg.schedule.build()?;
    let observed: Vec<Image> = views.iter().map(|v| v.observed.clone()).collect();
    state.samples = draw_samples(priors, &observed, &schedule, mix_seed(cfg.seed, 1))?;
    run_iterations(state, views, cfg, cfg.stage1_iterations)
}

/// Renders the current albedo AOV and specular shading of every view at `eval_spp`.
pub fn guidance_targets(state: &OptimState, views: &[View], cfg: &OptimConfig) -> Result<Vec<GuidanceTargets>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let b = render(&state.scene, &v.camera, &cfg.render_config(cfg.eval_spp, mix_seed(cfg.seed ^ 0x7A46, i as u64)))?;
            Ok(GuidanceTargets { albedo: b.albedo, specular: b.specular })
        })
        .collect()
}

/// Fine stage: re-generates guided samples once from the current estimates, then continues
/// optimizing against them.
pub fn stage2_optimize(state: &mut OptimState, views: &[View], priors: &Priors, cfg: &OptimConfig) -> Result<()> {
    cfg.validate()?;
    if state.stage != Stage::Coarse {
        return Err(Error::InvalidArgument("stage 2 needs a coarse state".into()));
    }
    let schedule = cfg.schedule.build()?;
    let observed: Vec<Image> = views.iter().map(|v| v.observed.clone()).collect();
    let mut targets = guidance_targets(state, views, cfg)?;
    // The albedo term only sees the estimate up to scale and shift, so the guidance target is
    // brought to the scale of the coarse sample it replaces.
    for ((t, v), s) in targets.iter_mut().zip(views).zip(&state.samples) {
        if let Some(sample) = &s.albedo {
            if v.mask.count() > 0 {
                t.albedo = ssi_align(&t.albedo, sample, &v.mask)?.0;
            }
        }
    }
    state.samples = draw_guided_samples(priors, &observed, &targets, &cfg.guidance, &schedule, mix_seed(cfg.seed, 2))?;
    state.stage = Stage::Fine;
    run_iterations(state, views, cfg, cfg.stage2_iterations)
}

/// Both stages from the neutral initialization.
pub fn decompose(geometry: Arc<Geometry>, views: &[View], priors: &Priors, cfg: &OptimConfig) -> Result<OptimState> {
    let mut state = OptimState::initial(geometry, views, cfg)?;
    stage1_optimize(&mut state, views, priors, cfg)?;
    stage2_optimize(&mut state, views, priors, cfg)?;
    Ok(state)
}

/// Renders the buffers of `views` with the current estimate.
pub fn render_views(scene: &Scene, cameras: &[Camera], spp: usize, seed: u64) -> Result<Vec<RenderBuffers>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| render(scene, c, &RenderConfig { spp, seed: mix_seed(seed, i as u64), ..Default::default() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::GradImage;
    use crate::math::Vec3;
    use crate::scene_io::mesh::uv_sphere;

    fn tiny_setup() -> (Arc<Geometry>, Vec<View>, OptimConfig) {
        let geo = Geometry::new(uv_sphere(1.0, 12, 24)).unwrap();
        let gt = Scene::new(
            geo.clone(),
            MaterialTexture::constant(TextureKind::Albedo, 8, 8, &[0.7, 0.4, 0.2]).unwrap(),
            MaterialTexture::constant(TextureKind::Roughness, 8, 8, &[0.4]).unwrap(),
            EnvironmentMap::constant(8, 4, [1.0, 1.0, 1.0]),
        )
        .unwrap();
        let cams: Vec<Camera> = (0..2)
            .map(|k| {
                let a = k as f64 * 2.0;
                Camera::look_at(Vec3::new(3.0 * a.sin(), 0.5, 3.0 * a.cos()), Vec3::ZERO, Vec3::Y, 40.0, 16, 16)
            })
            .collect();
        let bufs = render_views(&gt, &cams, 32, 5).unwrap();
        let views = cams
            .into_iter()
            .zip(bufs)
            .map(|(c, b)| View::new(c, b.rgb, b.mask).unwrap())
            .collect();
        let cfg = OptimConfig {
            stage1_iterations: 0,
            stage2_iterations: 0,
            spp: 4,
            eval_spp: 8,
            texture_resolution: 8,
            env_resolution: [8, 4],
            ..OptimConfig::desk()
        };
        (geo, views, cfg)
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let (geo, views, cfg) = tiny_setup();
        let init = OptimState::initial(geo.clone(), &views, &cfg).unwrap();
        let out = decompose(geo, &views, &Priors::none(), &cfg).unwrap();
        assert_eq!(out.scene.albedo, init.scene.albedo);
        assert_eq!(out.scene.roughness, init.scene.roughness);
        assert_eq!(out.scene.env.radiance(), init.scene.env.radiance());
        assert_eq!(out.step, 0);
        assert_eq!(out.stage, Stage::Fine);
        let gray = mean_observed_luminance(&views) as f32;
        assert!(init.scene.env.radiance().data.iter().all(|&v| v == gray));
        assert!(init.scene.albedo.image.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stage1_lowers_the_loss_and_stage_order_is_enforced() {
        let (geo, views, mut cfg) = tiny_setup();
        cfg.stage1_iterations = 60;
        let mut state = OptimState::initial(geo, &views, &cfg).unwrap();
        let before = evaluate_loss(&state, &views, &cfg).unwrap();
        stage1_optimize(&mut state, &views, &Priors::none(), &cfg).unwrap();
        let after = evaluate_loss(&state, &views, &cfg).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(state.scene.albedo.in_range() && state.scene.roughness.in_range());
        assert_eq!(state.history.len(), 60);
        state.stage = Stage::Fine;
        assert!(stage2_optimize(&mut state, &views, &Priors::none(), &cfg).is_err());
        assert!(stage1_optimize(&mut state, &views, &Priors::none(), &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (geo, views, mut cfg) = tiny_setup();
        cfg.stage1_iterations = 3;
        let mut state = OptimState::initial(geo.clone(), &views, &cfg).unwrap();
        let albedo: Vec<Image> = views.iter().map(|v| v.observed.clone()).collect();
        let priors = Priors::oracle(&albedo, &albedo, 0.01).unwrap();
        stage1_optimize(&mut state, &views, &priors, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let back = OptimState::load(dir.path(), geo).unwrap();
        assert_eq!(back.scene.albedo, state.scene.albedo);
        assert_eq!(back.scene.env.radiance(), state.scene.env.radiance());
        assert_eq!(back.albedo_moments, state.albedo_moments);
        assert_eq!(back.env_moments, state.env_moments);
        assert_eq!(back.samples, state.samples);
        assert_eq!(back.albedo_footprint, state.albedo_footprint);
        assert_eq!(back.step, 3);
        assert_eq!(back.history.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    fn bowl_state() -> OptimState {
        let (geo, views, cfg) = tiny_setup();
        OptimState::initial(geo, &views, &cfg).unwrap()
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut state = bowl_state();
        let before = state.scene.clone();
        let zero = ParamGradients::zeros_for(&state.scene);
        let cfg = AdamConfig::default();
        adam_step(&mut state, &zero, &cfg, &AdamConfig::with_lr(5e-3)).unwrap();
        assert_eq!(state.scene.albedo, before.albedo);
        assert_eq!(state.scene.env.radiance(), before.env.radiance());

        let mut g = ParamGradients::zeros_for(&state.scene);
        g.d_albedo.data.iter_mut().for_each(|v| *v = 3.0);
        g.d_roughness.data.iter_mut().for_each(|v| *v = -0.2);
        let mut fresh = bowl_state();
        adam_step(&mut fresh, &g, &cfg, &AdamConfig::with_lr(5e-3)).unwrap();
        for &a in &fresh.scene.albedo.image.data {
            assert!((a - (0.5 - 1e-2)).abs() < 1e-6);
        }
        for &r in &fresh.scene.roughness.image.data {
            assert!((r - (0.5 + 1e-2)).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_clamps_parameters() {
        let mut state = bowl_state();
        let mut g = ParamGradients::zeros_for(&state.scene);
        g.d_albedo.data.iter_mut().for_each(|v| *v = -1.0);
        g.d_roughness.data.iter_mut().for_each(|v| *v = 1.0);
        g.d_env.data.iter_mut().for_each(|v| *v = 1.0);
        let big = AdamConfig::with_lr(10.0);
        adam_step(&mut state, &g, &big, &big).unwrap();
        assert!(state.scene.albedo.image.data.iter().all(|&v| v == 1.0));
        assert!(state.scene.roughness.image.data.iter().all(|&v| v == 0.01));
        assert!(state.scene.env.radiance().data.iter().all(|&v| v == 0.0));
        let mut bad = ParamGradients::zeros_for(&state.scene);
        bad.d_env = GradImage::zeros(1, 1, 3);
        assert!(adam_step(&mut state, &bad, &big, &big).is_err());
    }

    /// Adam on f(x, y) = (x − 0.3)² + 4(y − 0.7)² through the albedo block.
    #[test]
    fn adam_converges_on_a_quadratic_bowl() {
        let mut state = bowl_state();
        let cfg = AdamConfig::default();
        let zero_env = AdamConfig::with_lr(0.0);
        let idx = [0usize, 1usize];
        for _ in 0..500 {
            let p = &state.scene.albedo.image.data;
            let mut g = ParamGradients::zeros_for(&state.scene);
            g.d_albedo.data[idx[0]] = 2.0 * (p[idx[0]] as f64 - 0.3);
            g.d_albedo.data[idx[1]] = 8.0 * (p[idx[1]] as f64 - 0.7);
            adam_step(&mut state, &g, &cfg, &zero_env).unwrap();
        }
        let p = &state.scene.albedo.image.data;
        // Closed-form minimum (0.3, 0.7).
        assert!((p[0] - 0.3).abs() < 1e-4 && (p[1] - 0.7).abs() < 1e-4, "{} {}", p[0], p[1]);
    }
}
