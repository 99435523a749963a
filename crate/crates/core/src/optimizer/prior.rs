//! Material priors queried by the optimizer: per-view Gaussian oracles, shared learned models,
//! or nothing at all.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{
    GaussianOracle, Guide, GuidanceConfig, NoiseSchedule, ScoreModel, highres_tiled_sample, sample, sample_guided,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::mix_seed;

#[derive(Clone)]
pub enum PriorModel {
    /// One model per view, such as an oracle centred on that view's ground truth.
    PerView(Vec<Arc<dyn ScoreModel>>),
    /// One model for all views, conditioned on the observed image.
    Shared(Arc<dyn ScoreModel>),
}

impl PriorModel {
    fn for_view(&self, view: usize) -> Result<&dyn ScoreModel> {
        match self {
            PriorModel::PerView(v) => v
                .get(view)
                .map(|m| m.as_ref())
                .ok_or_else(|| Error::InvalidArgument(format!("prior has {} views, view {view} requested", v.len()))),
            PriorModel::Shared(m) => Ok(m.as_ref()),
        }
    }

    fn is_per_view(&self) -> bool {
        matches!(self, PriorModel::PerView(_))
    }
}

#[derive(Clone, Default)]
pub struct Priors {
    pub albedo: Option<PriorModel>,
    pub specular: Option<PriorModel>,
}

impl std::fmt::Debug for Priors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |m: &Option<PriorModel>| match m {
            None => "none".to_string(),
            Some(PriorModel::PerView(v)) => format!("per-view({})", v.len()),
            Some(PriorModel::Shared(_)) => "shared".to_string(),
        };
        f.debug_struct("Priors").field("albedo", &show(&self.albedo)).field("specular", &show(&self.specular)).finish()
    }
}

impl Priors {
    pub fn none() -> Priors {
        Priors::default()
    }

    pub fn is_none(&self) -> bool {
        self.albedo.is_none() && self.specular.is_none()
    }

    /// Gaussian oracles `N(gt, σ²·I)` per view for albedo and specular shading buffers, with
    /// `σ = relative_std · mean(buffer over lit pixels)` so both buffers get the same relative
    /// noise whatever their magnitude.
    pub fn oracle(albedo_gt: &[Image], specular_gt: &[Image], relative_std: f32) -> Result<Priors> {
        if albedo_gt.len() != specular_gt.len() {
            return Err(Error::InvalidArgument("oracle needs one albedo and one specular buffer per view".into()));
        }
        if !(relative_std > 0.0 && relative_std.is_finite()) {
            return Err(Error::InvalidArgument("oracle noise level must be positive".into()));
        }
        let build = |bufs: &[Image]| -> Result<PriorModel> {
            let models = bufs
                .iter()
                .map(|b| {
                    let sigma = (relative_std as f64 * lit_mean(b)).max(1e-4);
                    Ok(Arc::new(GaussianOracle::isotropic(b.clone(), (sigma * sigma) as f32)?) as Arc<dyn ScoreModel>)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PriorModel::PerView(models))
        };
        Ok(Priors { albedo: Some(build(albedo_gt)?), specular: Some(build(specular_gt)?) })
    }

    pub fn shared(albedo: Arc<dyn ScoreModel>, specular: Arc<dyn ScoreModel>) -> Priors {
        Priors { albedo: Some(PriorModel::Shared(albedo)), specular: Some(PriorModel::Shared(specular)) }
    }
}

/// Mean over pixels with any nonzero channel.
fn lit_mean(img: &Image) -> f64 {
    let c = img.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in img.data.chunks(c) {
        if p.iter().any(|&v| v != 0.0) {
            sum += p.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Cached prior draws for one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorSamples {
    pub albedo: Option<Image>,
    pub specular: Option<Image>,
}

/// Guidance targets for one view: the current albedo AOV and specular shading estimates.
#[derive(Clone, Debug)]
pub struct GuidanceTargets {
    pub albedo: Image,
    pub specular: Image,
}

const ALBEDO_STREAM: u64 = 1;
const SPECULAR_STREAM: u64 = 2;

fn stream_seed(seed: u64, view: usize, stream: u64) -> u64 {
    mix_seed(mix_seed(seed, view as u64), stream)
}

/// Unguided draws `k_d^s ~ p(k_d | I)`, `S_spec^s ~ p(S_spec | I)` for every observation.
pub fn draw_samples(priors: &Priors, observed: &[Image], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<PriorSamples>> {
    observed
        .par_iter()
        .enumerate()
        .map(|(v, obs)| {
            let draw = |m: &Option<PriorModel>, stream| -> Result<Option<Image>> {
                let Some(m) = m else { return Ok(None) };
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, v, stream));
                sample(m.for_view(v)?, (obs.width, obs.height, 3), Some(obs), schedule, &mut rng).map(Some)
            };
            Ok(PriorSamples { albedo: draw(&priors.albedo, ALBEDO_STREAM)?, specular: draw(&priors.specular, SPECULAR_STREAM)? })
        })
        .collect()
}

/// Guided draws `k̃_d`, `S̃_spec` steered towards the current estimates. Shared models on images
/// larger than one patch use tiled sampling with `gamma_c`; everything else samples the full
/// image with `gamma`.
pub fn draw_guided_samples(
    priors: &Priors,
    observed: &[Image],
    targets: &[GuidanceTargets],
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<PriorSamples>> {
    guidance.validate()?;
    if targets.len() != observed.len() {
        return Err(Error::InvalidArgument("one guidance target per view is required".into()));
    }
    observed
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(v, (obs, tg))| {
            let draw = |m: &Option<PriorModel>, target: &Image, stream| -> Result<Option<Image>> {
                let Some(m) = m else { return Ok(None) };
                let s = stream_seed(seed, v, stream);
                let model = m.for_view(v)?;
                let tiled = !m.is_per_view() && (obs.width > guidance.patch_size || obs.height > guidance.patch_size);
                if tiled {
                    return highres_tiled_sample(model, obs, target, guidance, schedule, s).map(Some);
                }
                let guide = Guide { target, gamma: guidance.gamma, norm: guidance.norm, blur: None };
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                sample_guided(model, (obs.width, obs.height, 3), Some(obs), &guide, schedule, &mut rng).map(Some)
            };
            Ok(PriorSamples {
                albedo: draw(&priors.albedo, &tg.albedo, ALBEDO_STREAM)?,
                specular: draw(&priors.specular, &tg.specular, SPECULAR_STREAM)?,
            })
        })
        .collect()
}
