//! DDPM sampling, DPS guidance and patch-tiled high-resolution sampling behind a pluggable
//! noise-predictor interface.

pub mod oracle;
pub mod tiled;
pub mod toy;

mod nn;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use oracle::{GaussianOracle, gaussian_oracle_model};
pub use tiled::{GaussianBlur, TileLayout, coarse_to_fine, highres_tiled_sample};
pub use toy::{ToyConfig, ToyDenoiser, TrainReport, train_toy_denoiser};

/// Per-step constants of a DDPM chain. Steps are numbered `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end`, σ_t² = β_t and σ_1 = 0.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!("invalid β range [{beta_start}, {beta_end}]")));
        }
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            prod *= 1.0 - beta;
            alpha.push(1.0 - beta);
            alpha_bar.push(prod);
            sigma.push(if i == 0 { 0.0 } else { beta.sqrt() });
        }
        Ok(NoiseSchedule { alpha, alpha_bar, sigma })
    }

    /// The standard 1e-4..2e-2 range defined for 1000 steps, rescaled by 1000/T so that
    /// shorter chains still end near pure noise.
    pub fn ddpm(steps: usize) -> Result<NoiseSchedule> {
        let s = 1000.0 / steps.max(1) as f64;
        NoiseSchedule::linear(steps, 1e-4 * s, (2e-2 * s).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// Step count and β range; `steps` other than 1000 rescale the range as in [`NoiseSchedule::ddpm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 100 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::ddpm(self.steps)
    }
}

/// A noise predictor ε_θ(x_t, t; I). Implementations are deterministic and shareable.
pub trait ScoreModel: Send + Sync {
    fn predict_noise(&self, x_t: &Image, t: usize, condition: Option<&Image>, schedule: &NoiseSchedule)
    -> Result<Image>;

    /// `(∂x̂⁰/∂x_t)ᵀ v` for the one-step denoised estimate. The default treats ε̂ as constant.
    fn denoised_vjp(&self, _x_t: &Image, t: usize, v: &Image, schedule: &NoiseSchedule) -> Image {
        let s = 1.0 / schedule.alpha_bar(t).sqrt();
        v.map(|g| (g as f64 * s) as f32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceNorm {
    #[default]
    L2,
    L1,
}

/// Guidance scales, blur and patch layout for guided and tiled sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub gamma_c: f64,
    /// Blur σ in pixels; `None` uses overlap / 4.
    pub blur_sigma: Option<f64>,
    pub patch_size: usize,
    pub overlap: usize,
    pub norm: GuidanceNorm,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { gamma: 1.0, gamma_c: 1.0, blur_sigma: None, patch_size: 64, overlap: 16, norm: GuidanceNorm::L2 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma_c >= 0.0) {
            return Err(Error::InvalidArgument("guidance scales must be non-negative".into()));
        }
        if self.patch_size == 0 || self.overlap >= self.patch_size {
            return Err(Error::InvalidArgument(format!(
                "overlap {} must be smaller than patch size {}",
                self.overlap, self.patch_size
            )));
        }
        if self.blur_sigma.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::InvalidArgument("blur sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma.unwrap_or(self.overlap as f64 / 4.0)
    }
}

pub fn standard_normal(width: usize, height: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let data = (0..width * height * channels).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Image { width, height, channels, data }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise.
pub fn forward_diffuse(x0: &Image, t: usize, noise: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    let i = schedule.check(t)?;
    x0.check_same_shape(noise, "noise")?;
    let (a, b) = (schedule.alpha_bar[i].sqrt(), (1.0 - schedule.alpha_bar[i]).sqrt());
    let data = x0.data.iter().zip(&noise.data).map(|(&x, &n)| (a * x as f64 + b * n as f64) as f32).collect();
    Ok(Image { data, ..x0.clone() })
}

/// x̂⁰_t = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
pub fn denoised_estimate(x_t: &Image, eps: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
    let i = schedule.check(t)?;
    x_t.check_same_shape(eps, "noise prediction")?;
    let (a, b) = (schedule.alpha_bar[i].sqrt(), (1.0 - schedule.alpha_bar[i]).sqrt());
    let data = x_t.data.iter().zip(&eps.data).map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32).collect();
    Ok(Image { data, ..x_t.clone() })
}

/// x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε)/√α_t + σ_t·z.
pub fn ddpm_update(x_t: &Image, eps: &Image, t: usize, schedule: &NoiseSchedule, z: &Image) -> Result<Image> {
    let i = schedule.check(t)?;
    x_t.check_same_shape(eps, "noise prediction")?;
    x_t.check_same_shape(z, "z")?;
    let alpha = schedule.alpha[i];
    let c = (1.0 - alpha) / (1.0 - schedule.alpha_bar[i]).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = schedule.sigma[i];
    let data = x_t
        .data
        .iter()
        .zip(&eps.data)
        .zip(&z.data)
        .map(|((&x, &e), &z)| {
            let mean = (x as f64 - c * e as f64) * inv;
            (if sigma > 0.0 { mean + sigma * z as f64 } else { mean }) as f32
        })
        .collect();
    Ok(Image { data, ..x_t.clone() })
}

pub fn ddpm_step(
    model: &dyn ScoreModel,
    x_t: &Image,
    t: usize,
    condition: Option<&Image>,
    schedule: &NoiseSchedule,
    z: &Image,
) -> Result<Image> {
    let eps = model.predict_noise(x_t, t, condition, schedule)?;
    ddpm_update(x_t, &eps, t, schedule, z)
}

/// Guidance term `γ ∇_{x_t} ‖G(x̂⁰_t) − target‖`, with `G` an optional blur.
#[derive(Clone, Copy, Debug)]
pub struct Guide<'a> {
    pub target: &'a Image,
    pub gamma: f64,
    pub norm: GuidanceNorm,
    pub blur: Option<&'a GaussianBlur>,
}

fn norm_gradient(r: &Image, norm: GuidanceNorm) -> Image {
    match norm {
        GuidanceNorm::L2 => {
            let n = r.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if n > 0.0 { r.map(|v| (v as f64 / n) as f32) } else { r.map(|_| 0.0) }
        }
        GuidanceNorm::L1 => r.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
    }
}

pub fn guided_step(
    model: &dyn ScoreModel,
    x_t: &Image,
    t: usize,
    condition: Option<&Image>,
    guide: &Guide,
    schedule: &NoiseSchedule,
    z: &Image,
) -> Result<Image> {
    if !(guide.gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale {} must be non-negative", guide.gamma)));
    }
    let eps = model.predict_noise(x_t, t, condition, schedule)?;
    if guide.gamma == 0.0 {
        return ddpm_update(x_t, &eps, t, schedule, z);
    }
    let x0 = denoised_estimate(x_t, &eps, t, schedule)?;
    let blurred = match guide.blur {
        Some(b) => b.apply(&x0),
        None => x0,
    };
    blurred.check_same_shape(guide.target, "guidance target")?;
    let r = Image {
        data: blurred.data.iter().zip(&guide.target.data).map(|(a, b)| a - b).collect(),
        ..blurred
    };
    let mut g = norm_gradient(&r, guide.norm);
    if let Some(b) = guide.blur {
        g = b.adjoint(&g);
    }
    let g = model.denoised_vjp(x_t, t, &g, schedule);
    let guided = Image {
        data: eps.data.iter().zip(&g.data).map(|(&e, &g)| (e as f64 + guide.gamma * g as f64) as f32).collect(),
        ..eps
    };
    ddpm_update(x_t, &guided, t, schedule, z)
}

/// DPS step: ε̃ = ε̂ + γ∇_{x_t}‖x̂⁰_t − target‖ followed by the DDPM update.
#[allow(clippy::too_many_arguments)]
pub fn dps_step(
    model: &dyn ScoreModel,
    x_t: &Image,
    t: usize,
    condition: Option<&Image>,
    target: &Image,
    gamma: f64,
    norm: GuidanceNorm,
    schedule: &NoiseSchedule,
    z: &Image,
) -> Result<Image> {
    guided_step(model, x_t, t, condition, &Guide { target, gamma, norm, blur: None }, schedule, z)
}

/// Full chain from x_T ~ N(0, I). One z is drawn per step, including the last.
pub fn sample(
    model: &dyn ScoreModel,
    shape: (usize, usize, usize),
    condition: Option<&Image>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Image> {
    sample_chain(model, shape, condition, None, schedule, rng)
}

pub fn sample_guided(
    model: &dyn ScoreModel,
    shape: (usize, usize, usize),
    condition: Option<&Image>,
    guide: &Guide,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Image> {
    sample_chain(model, shape, condition, Some(guide), schedule, rng)
}

fn sample_chain(
    model: &dyn ScoreModel,
    (w, h, c): (usize, usize, usize),
    condition: Option<&Image>,
    guide: Option<&Guide>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Image> {
    let mut x = standard_normal(w, h, c, rng);
    for t in (1..=schedule.steps()).rev() {
        let z = standard_normal(w, h, c, rng);
        x = match guide {
            Some(g) => guided_step(model, &x, t, condition, g, schedule, &z)?,
            None => ddpm_step(model, &x, t, condition, schedule, &z)?,
        };
    }
    Ok(x)
}
