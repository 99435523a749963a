//! A small convolutional encoder-decoder noise predictor trained on (condition, material) pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::archive::TensorArchive;
use crate::diffusion::nn::{Conv, Dense, Tensor, time_embedding};
use crate::diffusion::{NoiseSchedule, ScheduleConfig, ScoreModel, denoised_estimate, forward_diffuse, standard_normal};
use crate::error::{Error, Result};
use crate::evaluation::psnr;
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Share of training draws taken from the lowest fifth of the steps.
    pub low_noise_fraction: f64,
    /// Noise draws held fixed for the before/after loss measurement.
    pub eval_draws: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            base_channels: 16,
            embed_dim: 16,
            iterations: 1500,
            batch: 4,
            learning_rate: 5e-3,
            seed: 0,
            schedule: ScheduleConfig::default(),
            low_noise_fraction: 0.5,
            eval_draws: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Net {
    c1: Conv,
    c2: Conv,
    c3: Conv,
    c4: Conv,
    c5: Conv,
    c6: Conv,
    e1: Dense,
    e2: Dense,
}

struct Cache {
    x: Tensor,
    emb: Vec<f32>,
    a1: Tensor,
    a1b: Tensor,
    p: Tensor,
    a2: Tensor,
    a2b: Tensor,
    cat: Tensor,
    a3: Tensor,
}

fn add_channel_bias(t: &mut Tensor, bias: &[f32]) {
    for (c, &b) in bias.iter().enumerate() {
        t.plane_mut(c).iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(t: &Tensor) -> Vec<f32> {
    (0..t.c).map(|c| t.plane(c).iter().sum()).collect()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor { data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(), ..*a }
}

impl Net {
    fn new(x_channels: usize, cond_channels: usize, f: usize, emb: usize, rng: &mut impl Rng) -> Net {
        Net {
            c1: Conv::new(x_channels + cond_channels, f, rng),
            c2: Conv::new(f, f, rng),
            c3: Conv::new(f, 2 * f, rng),
            c4: Conv::new(2 * f, 2 * f, rng),
            c5: Conv::new(3 * f, f, rng),
            c6: Conv::zeroed(f, x_channels),
            e1: Dense::new(emb, f, rng),
            e2: Dense::new(emb, 2 * f, rng),
        }
    }

    fn zeros_like(&self) -> Net {
        let mut n = self.clone();
        for p in n.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        n
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for c in [&mut self.c1, &mut self.c2, &mut self.c3, &mut self.c4, &mut self.c5, &mut self.c6] {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        for d in [&mut self.e1, &mut self.e2] {
            out.push(&mut d.w);
            out.push(&mut d.b);
        }
        out
    }

    fn params(&self) -> Vec<(String, Vec<usize>, &Vec<f32>)> {
        let mut out = Vec::new();
        for (i, c) in [&self.c1, &self.c2, &self.c3, &self.c4, &self.c5, &self.c6].into_iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![c.cout, c.cin, 3, 3], &c.w));
            out.push((format!("conv{}.bias", i + 1), vec![c.cout], &c.b));
        }
        for (i, d) in [&self.e1, &self.e2].into_iter().enumerate() {
            out.push((format!("embed{}.weight", i + 1), vec![d.cout, d.cin], &d.w));
            out.push((format!("embed{}.bias", i + 1), vec![d.cout], &d.b));
        }
        out
    }

    fn forward(&self, x: Tensor, emb: Vec<f32>) -> (Tensor, Cache) {
        let mut z1 = self.c1.forward(&x);
        add_channel_bias(&mut z1, &self.e1.forward(&emb));
        let a1 = z1.relu();
        let a1b = self.c2.forward(&a1).relu();
        let p = a1b.avg_pool();
        let mut z2 = self.c3.forward(&p);
        add_channel_bias(&mut z2, &self.e2.forward(&emb));
        let a2 = z2.relu();
        let a2b = self.c4.forward(&a2).relu();
        let cat = Tensor::concat(&a2b.upsample(x.h, x.w), &a1b);
        let a3 = self.c5.forward(&cat).relu();
        let out = self.c6.forward(&a3);
        (out, Cache { x, emb, a1, a1b, p, a2, a2b, cat, a3 })
    }

    fn backward(&self, k: &Cache, d_out: &Tensor, g: &mut Net) {
        let d_a3 = self.c6.backward(&k.a3, d_out, &mut g.c6.w, &mut g.c6.b, true);
        let d_z3 = Tensor::relu_backward(&k.a3, &d_a3);
        let d_cat = self.c5.backward(&k.cat, &d_z3, &mut g.c5.w, &mut g.c5.b, true);
        let (d_u, d_skip) = d_cat.split(k.a2b.c);
        let d_a2b = Tensor::upsample_backward(&d_u, k.a2b.h, k.a2b.w);
        let d_z4 = Tensor::relu_backward(&k.a2b, &d_a2b);
        let d_a2 = self.c4.backward(&k.a2, &d_z4, &mut g.c4.w, &mut g.c4.b, true);
        let d_z2 = Tensor::relu_backward(&k.a2, &d_a2);
        self.e2.backward(&k.emb, &channel_sums(&d_z2), &mut g.e2.w, &mut g.e2.b);
        let d_p = self.c3.backward(&k.p, &d_z2, &mut g.c3.w, &mut g.c3.b, true);
        let d_a1b = add(&Tensor::avg_pool_backward(&d_p, k.a1b.h, k.a1b.w), &d_skip);
        let d_z1b = Tensor::relu_backward(&k.a1b, &d_a1b);
        let d_a1 = self.c2.backward(&k.a1, &d_z1b, &mut g.c2.w, &mut g.c2.b, true);
        let d_z1 = Tensor::relu_backward(&k.a1, &d_a1);
        self.e1.backward(&k.emb, &channel_sums(&d_z1), &mut g.e1.w, &mut g.e1.b);
        self.c1.backward(&k.x, &d_z1, &mut g.c1.w, &mut g.c1.b, false);
    }
}

fn to_chw(img: &Image) -> Tensor {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut t = Tensor::zeros(c, h, w);
    for p in 0..w * h {
        for k in 0..c {
            t.data[k * w * h + p] = img.data[p * c + k];
        }
    }
    t
}

fn to_hwc(t: &Tensor) -> Image {
    let mut img = Image::new(t.w, t.h, t.c);
    for p in 0..t.w * t.h {
        for k in 0..t.c {
            img.data[p * t.c + k] = t.data[k * t.w * t.h + p];
        }
    }
    img
}

/// Learned noise predictor. Guidance through it uses the constant-ε̂ Jacobian approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    net: Net,
    x_channels: usize,
    cond_channels: usize,
    embed_dim: usize,
    steps: usize,
}

impl ToyDenoiser {
    pub fn untrained(x_channels: usize, cond_channels: usize, cfg: &ToyConfig) -> ToyDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        ToyDenoiser {
            net: Net::new(x_channels, cond_channels, cfg.base_channels, cfg.embed_dim, &mut rng),
            x_channels,
            cond_channels,
            embed_dim: cfg.embed_dim,
            steps: cfg.schedule.steps,
        }
    }

    fn input(&self, x_t: &Image, condition: Option<&Image>) -> Result<Tensor> {
        if x_t.channels != self.x_channels {
            return Err(Error::ShapeMismatch(format!("model expects {} channels, got {}", self.x_channels, x_t.channels)));
        }
        let x = to_chw(x_t);
        if self.cond_channels == 0 {
            return Ok(x);
        }
        let cond = condition.ok_or_else(|| Error::InvalidArgument("model needs a condition image".into()))?;
        if cond.width != x_t.width || cond.height != x_t.height || cond.channels != self.cond_channels {
            return Err(Error::ShapeMismatch("condition does not match the model or x_t".into()));
        }
        Ok(Tensor::concat(&x, &to_chw(cond)))
    }

    fn embedding(&self, t: usize) -> Vec<f32> {
        time_embedding(t as f64 / self.steps as f64, self.embed_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = TensorArchive::new();
        let meta = [self.x_channels, self.cond_channels, self.net.c1.cout, self.embed_dim, self.steps];
        a.push("meta", &[meta.len()], meta.iter().map(|&v| v as f32).collect())?;
        for (name, shape, data) in self.net.params() {
            a.push(&name, &shape, data.clone())?;
        }
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<ToyDenoiser> {
        let a = TensorArchive::read(path)?;
        let meta: Vec<usize> = a.expect("meta", &[5])?.data.iter().map(|&v| v as usize).collect();
        let cfg = ToyConfig {
            base_channels: meta[2],
            embed_dim: meta[3],
            schedule: ScheduleConfig { steps: meta[4] },
            ..Default::default()
        };
        let mut model = ToyDenoiser::untrained(meta[0], meta[1], &cfg);
        let specs: Vec<(String, Vec<usize>)> = model.net.params().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in specs.iter().zip(model.net.params_mut()) {
            *dst = a.expect(name, shape)?.data.clone();
        }
        Ok(model)
    }
}

impl ScoreModel for ToyDenoiser {
    fn predict_noise(&self, x_t: &Image, t: usize, condition: Option<&Image>, _: &NoiseSchedule) -> Result<Image> {
        let x = self.input(x_t, condition)?;
        let (out, _) = self.net.forward(x, self.embedding(t));
        Ok(to_hwc(&out))
    }
}

/// A (condition, target) draw with fixed step and noise.
struct Draw {
    pair: usize,
    t: usize,
    noise: Image,
}

fn draw(pairs: &[(Image, Image)], schedule: &NoiseSchedule, low: f64, rng: &mut impl Rng) -> Draw {
    let pair = rng.gen_range(0..pairs.len());
    let tgt = &pairs[pair].1;
    let top = if rng.r#gen::<f64>() < low { (schedule.steps() / 5).max(1) } else { schedule.steps() };
    Draw { pair, t: rng.gen_range(1..=top), noise: standard_normal(tgt.width, tgt.height, tgt.channels, rng) }
}

fn draw_loss(model: &ToyDenoiser, pairs: &[(Image, Image)], d: &Draw, schedule: &NoiseSchedule, grads: Option<(&mut Net, f32)>) -> Result<f64> {
    let (cond, target) = &pairs[d.pair];
    let x_t = forward_diffuse(target, d.t, &d.noise, schedule)?;
    let (out, cache) = model.net.forward(model.input(&x_t, Some(cond))?, model.embedding(d.t));
    let eps = to_chw(&d.noise);
    let n = out.data.len() as f64;
    let loss = out.data.iter().zip(&eps.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
    if let Some((g, scale)) = grads {
        let d_out = Tensor {
            data: out.data.iter().zip(&eps.data).map(|(a, b)| 2.0 * (a - b) * scale / n as f32).collect(),
            ..out
        };
        model.net.backward(&cache, &d_out, g);
    }
    Ok(loss)
}

/// Trains a noise predictor with mean-squared noise-prediction loss and Adam.
pub fn train_toy_denoiser(dataset: &[(Image, Image)], cfg: &ToyConfig) -> Result<(ToyDenoiser, TrainReport)> {
    let Some((c0, t0)) = dataset.first() else {
        return Err(Error::InvalidArgument("toy denoiser needs a non-empty dataset".into()));
    };
    for (c, t) in dataset {
        if !c.same_shape(c0) || !t.same_shape(t0) || c.width != t.width || c.height != t.height {
            return Err(Error::ShapeMismatch("dataset pairs must share one resolution".into()));
        }
    }
    if cfg.batch == 0 || cfg.base_channels == 0 || cfg.embed_dim < 2 {
        return Err(Error::InvalidArgument("toy config needs batch, channels and embedding > 0".into()));
    }
    let schedule = cfg.schedule.build()?;
    let mut model = ToyDenoiser::untrained(t0.channels, c0.channels, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let eval: Vec<Draw> = (0..cfg.eval_draws.max(1)).map(|_| draw(dataset, &schedule, 0.0, &mut rng)).collect();
    let eval_loss = |m: &ToyDenoiser| -> Result<f64> {
        Ok(eval.iter().map(|d| draw_loss(m, dataset, d, &schedule, None)).sum::<Result<f64>>()? / eval.len() as f64)
    };
    let initial_loss = eval_loss(&model)?;
    let mut m = model.net.zeros_like();
    let mut v = model.net.zeros_like();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % dataset.len() == 0 {
            order.shuffle(&mut rng);
        }
        let mut g = model.net.zeros_like();
        let mut total = 0.0;
        for b in 0..cfg.batch {
            let mut d = draw(dataset, &schedule, cfg.low_noise_fraction, &mut rng);
            d.pair = order[(it * cfg.batch + b) % dataset.len()];
            total += draw_loss(&model, dataset, &d, &schedule, Some((&mut g, 1.0 / cfg.batch as f32)))?;
        }
        let loss = total / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: it });
        }
        losses.push(loss);
        let (mut ps, gs, mut ms, mut vs) = (model.net.params_mut(), g.params_mut(), m.params_mut(), v.params_mut());
        let frac = it as f64 / cfg.iterations as f64;
        let adam = AdamConfig::with_lr(cfg.learning_rate * (1.0 - 0.9 * frac));
        for i in 0..ps.len() {
            adam.update(it as u64 + 1, &mut ps[i][..], &gs[i][..], &mut ms[i][..], &mut vs[i][..]);
        }
        if it % 100 == 0 {
            log::debug!("toy denoiser iteration {it}: loss {loss:.4}");
        }
    }
    let final_loss = eval_loss(&model)?;
    Ok((model, TrainReport { initial_loss, final_loss, losses }))
}

/// Mean PSNR of the one-step denoised estimate x̂⁰_t against each target at step `t`.
pub fn one_step_psnr(model: &dyn ScoreModel, pairs: &[(Image, Image)], t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (cond, target) in pairs {
        let noise = standard_normal(target.width, target.height, target.channels, &mut rng);
        let x_t = forward_diffuse(target, t, &noise, schedule)?;
        let eps = model.predict_noise(&x_t, t, Some(cond), schedule)?;
        total += psnr(&denoised_estimate(&x_t, &eps, t, schedule)?, target, None, 1.0)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}
