//! Patch-tiled guided sampling for images larger than the model's native resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{Guide, GuidanceConfig, NoiseSchedule, ScoreModel, sample, sample_guided};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::mix_seed;

/// Separable Gaussian blur with clamp-to-edge borders, truncated at 3σ.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlur {
    kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(sigma: f64) -> GaussianBlur {
        if !(sigma > 0.0) {
            return GaussianBlur { kernel: vec![1.0] };
        }
        let r = (3.0 * sigma).ceil() as i64;
        let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        GaussianBlur { kernel }
    }

    pub fn radius(&self) -> usize {
        self.kernel.len() / 2
    }

    fn pass(&self, img: &Image, horizontal: bool, adjoint: bool) -> Image {
        let (w, h, c) = (img.width, img.height, img.channels);
        let r = self.radius() as i64;
        let mut acc = vec![0.0f64; w * h * c];
        let len = if horizontal { w } else { h } as i64;
        for y in 0..h {
            for x in 0..w {
                let pos = if horizontal { x } else { y } as i64;
                for (k, &wk) in self.kernel.iter().enumerate() {
                    let q = (pos + k as i64 - r).clamp(0, len - 1) as usize;
                    let (qx, qy) = if horizontal { (q, y) } else { (x, q) };
                    let (src, dst) = if adjoint { ((x, y), (qx, qy)) } else { ((qx, qy), (x, y)) };
                    for ch in 0..c {
                        acc[(dst.1 * w + dst.0) * c + ch] += img.data[(src.1 * w + src.0) * c + ch] as f64 * wk;
                    }
                }
            }
        }
        Image { width: w, height: h, channels: c, data: acc.into_iter().map(|v| v as f32).collect() }
    }

    pub fn apply(&self, img: &Image) -> Image {
        if self.kernel.len() == 1 {
            return img.clone();
        }
        self.pass(&self.pass(img, true, false), false, false)
    }

    /// Transpose of [`GaussianBlur::apply`], which differs from it at the borders.
    pub fn adjoint(&self, img: &Image) -> Image {
        if self.kernel.len() == 1 {
            return img.clone();
        }
        self.pass(&self.pass(img, false, true), true, true)
    }
}

/// Patch origins covering a padded canvas of `padded_width × padded_height`.
#[derive(Clone, Debug, PartialEq)]
pub struct TileLayout {
    pub patch: usize,
    pub overlap: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub origins: Vec<(usize, usize)>,
}

fn axis_count(len: usize, patch: usize, stride: usize) -> usize {
    if len <= patch { 1 } else { (len - patch).div_ceil(stride) + 1 }
}

impl TileLayout {
    pub fn new(width: usize, height: usize, patch: usize, overlap: usize) -> Result<TileLayout> {
        if patch == 0 || overlap >= patch {
            return Err(Error::InvalidArgument(format!("overlap {overlap} must be smaller than patch {patch}")));
        }
        if width < patch || height < patch {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} is smaller than the {patch}x{patch} native resolution"
            )));
        }
        let stride = patch - overlap;
        let (nx, ny) = (axis_count(width, patch, stride), axis_count(height, patch, stride));
        let origins = (0..ny).flat_map(|j| (0..nx).map(move |i| (i * stride, j * stride))).collect();
        Ok(TileLayout {
            patch,
            overlap,
            padded_width: (nx - 1) * stride + patch,
            padded_height: (ny - 1) * stride + patch,
            origins,
        })
    }

    /// Ramp weight at offset `i` inside a patch: rises over the overlap band, 1 in the interior.
    fn ramp(&self, i: usize) -> f64 {
        if self.overlap == 0 {
            return 1.0;
        }
        let band = (self.overlap + 1) as f64;
        (((i + 1) as f64) / band).min(((self.patch - i) as f64) / band).min(1.0)
    }

    fn weight_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.padded_width * self.padded_height];
        for &(ox, oy) in &self.origins {
            for y in 0..self.patch {
                for x in 0..self.patch {
                    sum[(oy + y) * self.padded_width + ox + x] += self.ramp(x) * self.ramp(y);
                }
            }
        }
        sum
    }

    /// Normalized blend weight of every patch, as full padded-canvas images.
    pub fn normalized_weights(&self) -> Vec<Image> {
        let sum = self.weight_sum();
        self.origins
            .iter()
            .map(|&(ox, oy)| {
                let mut img = Image::new(self.padded_width, self.padded_height, 1);
                for y in 0..self.patch {
                    for x in 0..self.patch {
                        let k = (oy + y) * self.padded_width + ox + x;
                        img.data[k] = (self.ramp(x) * self.ramp(y) / sum[k]) as f32;
                    }
                }
                img
            })
            .collect()
    }

    /// Blends per-patch images (in `origins` order) and crops to `width × height`.
    pub fn blend(&self, patches: &[Image], width: usize, height: usize) -> Result<Image> {
        if patches.len() != self.origins.len() {
            return Err(Error::InvalidArgument("patch count does not match layout".into()));
        }
        let c = patches.first().map_or(1, |p| p.channels);
        let sum = self.weight_sum();
        let mut acc = vec![0.0f64; self.padded_width * self.padded_height * c];
        for (p, &(ox, oy)) in patches.iter().zip(&self.origins) {
            if p.width != self.patch || p.height != self.patch || p.channels != c {
                return Err(Error::ShapeMismatch("patch has the wrong shape".into()));
            }
            for y in 0..self.patch {
                for x in 0..self.patch {
                    let k = (oy + y) * self.padded_width + ox + x;
                    let w = self.ramp(x) * self.ramp(y) / sum[k];
                    for ch in 0..c {
                        acc[k * c + ch] += w * p.data[(y * self.patch + x) * c + ch] as f64;
                    }
                }
            }
        }
        let full = Image {
            width: self.padded_width,
            height: self.padded_height,
            channels: c,
            data: acc.into_iter().map(|v| v as f32).collect(),
        };
        Ok(full.crop(0, 0, width, height))
    }
}

fn pad_edge(img: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height, img.channels);
    for y in 0..height {
        for x in 0..width {
            let src = img.pixel(x.min(img.width - 1), y.min(img.height - 1)).to_vec();
            out.pixel_mut(x, y).copy_from_slice(&src);
        }
    }
    out
}

/// Samples a material image at `coarse_material`'s resolution patch by patch. Each patch runs a
/// guided chain pulling the blurred estimate towards the coarse patch with scale γ_c; patch
/// `k` draws its noise from `mix_seed(seed, k)`.
pub fn highres_tiled_sample(
    model: &dyn ScoreModel,
    condition: &Image,
    coarse_material: &Image,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    cfg.validate()?;
    if condition.width != coarse_material.width || condition.height != coarse_material.height {
        return Err(Error::ShapeMismatch("condition and coarse material differ in resolution".into()));
    }
    let (w, h) = (coarse_material.width, coarse_material.height);
    let layout = TileLayout::new(w, h, cfg.patch_size, cfg.overlap)?;
    let cond = pad_edge(condition, layout.padded_width, layout.padded_height);
    let coarse = pad_edge(coarse_material, layout.padded_width, layout.padded_height);
    let blur = GaussianBlur::new(cfg.blur_sigma());
    let p = cfg.patch_size;
    let patches = layout
        .origins
        .par_iter()
        .enumerate()
        .map(|(k, &(ox, oy))| {
            let cond_p = cond.crop(ox, oy, p, p);
            let target = coarse.crop(ox, oy, p, p);
            let guide = Guide { target: &target, gamma: cfg.gamma_c, norm: cfg.norm, blur: Some(&blur) };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
            sample_guided(model, (p, p, coarse.channels), Some(&cond_p), &guide, schedule, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    layout.blend(&patches, w, h)
}

/// Predicts a coarse material from the condition downsampled to the native resolution,
/// upsamples it and refines it with [`highres_tiled_sample`].
pub fn coarse_to_fine(
    model: &dyn ScoreModel,
    condition: &Image,
    channels: usize,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    let p = cfg.patch_size;
    let small = condition.resize_bilinear(p, p);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let coarse = sample(model, (p, p, channels), Some(&small), schedule, &mut rng)?;
    let up = coarse.resize_bilinear(condition.width, condition.height);
    highres_tiled_sample(model, condition, &up, cfg, schedule, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GaussianOracle, standard_normal};
    use proptest::prelude::*;

    #[test]
    fn blur_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = standard_normal(9, 7, 2, &mut rng);
        let b = standard_normal(9, 7, 2, &mut rng);
        let blur = GaussianBlur::new(1.3);
        assert_eq!(blur.radius(), 4);
        let dot = |x: &Image, y: &Image| x.data.iter().zip(&y.data).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
        let lhs = dot(&blur.apply(&a), &b);
        let rhs = dot(&a, &blur.adjoint(&b));
        assert!((lhs - rhs).abs() < 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        let flat = Image::filled(9, 7, &[0.25, 2.0]);
        for (x, y) in blur.apply(&flat).data.iter().zip(&flat.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn layout_covers_with_padding() {
        let l = TileLayout::new(100, 64, 64, 16).unwrap();
        assert_eq!(l.origins, vec![(0, 0), (48, 0)]);
        assert_eq!((l.padded_width, l.padded_height), (112, 64));
        assert!(TileLayout::new(32, 64, 64, 16).is_err());
        assert!(TileLayout::new(64, 64, 16, 16).is_err());
    }

    proptest! {
        #[test]
        fn weights_partition_unity(w in 8usize..60, h in 8usize..60, patch in 4usize..16, overlap in 0usize..8) {
            prop_assume!(overlap < patch && w >= patch && h >= patch);
            let l = TileLayout::new(w, h, patch, overlap).unwrap();
            let ws = l.normalized_weights();
            for k in 0..l.padded_width * l.padded_height {
                let s: f64 = ws.iter().map(|img| img.data[k] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_patch_equals_guided_chain() {
        let s = NoiseSchedule::ddpm(20).unwrap();
        let oracle = GaussianOracle::isotropic(Image::filled(1, 1, &[0.4, 0.5, 0.6]), 0.05).unwrap();
        let cfg = GuidanceConfig { gamma_c: 0.5, patch_size: 16, overlap: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coarse = standard_normal(16, 16, 3, &mut rng).map(|v| 0.5 + 0.1 * v);
        let cond = Image::filled(16, 16, &[1.0, 1.0, 1.0]);
        let tiled = highres_tiled_sample(&oracle, &cond, &coarse, &cfg, &s, 77).unwrap();
        let blur = GaussianBlur::new(cfg.blur_sigma());
        let guide = Guide { target: &coarse, gamma: 0.5, norm: cfg.norm, blur: Some(&blur) };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(77, 0));
        let direct = sample_guided(&oracle, (16, 16, 3), Some(&cond), &guide, &s, &mut rng).unwrap();
        assert_eq!(tiled, direct);
    }

    #[test]
    fn no_seams_for_uniform_prediction() {
        let s = NoiseSchedule::ddpm(20).unwrap();
        let oracle = GaussianOracle::isotropic(Image::filled(1, 1, &[0.5, 0.25, 0.75]), 1e-10).unwrap();
        let cfg = GuidanceConfig { gamma_c: 1.0, patch_size: 16, overlap: 4, ..Default::default() };
        let coarse = Image::filled(40, 28, &[0.5, 0.25, 0.75]);
        let out = highres_tiled_sample(&oracle, &coarse, &coarse, &cfg, &s, 3).unwrap();
        let mut max_jump = 0.0f32;
        for y in 0..out.height {
            for x in 1..out.width {
                for c in 0..3 {
                    max_jump = max_jump.max((out.get(x, y, c) - out.get(x - 1, y, c)).abs());
                }
            }
        }
        for x in 0..out.width {
            for y in 1..out.height {
                for c in 0..3 {
                    max_jump = max_jump.max((out.get(x, y, c) - out.get(x, y - 1, c)).abs());
                }
            }
        }
        assert!(max_jump < 1e-6, "{max_jump}");
    }
}
