//! Data terms, scale-and-shift alignment and texture smoothness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{GradImage, PixelLossGrads};
use crate::image::{Image, Mask};
use crate::renderer::RenderBuffers;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.5, lambda3: 0.5, lambda4: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3, self.lambda4].iter().all(|&l| l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Least-squares scale and offset mapping `a` onto `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsiFit {
    pub scale: f64,
    pub offset: f64,
    /// `a` was constant over the mask; the input was returned unchanged.
    pub degenerate: bool,
}

fn masked_indices(img: &Image, mask: &Mask) -> Vec<usize> {
    let c = img.channels;
    (0..img.pixel_count()).filter(|&p| mask.data[p]).flat_map(|p| (p * c)..(p * c + c)).collect()
}

fn fit(a: &Image, b: &Image, idx: &[usize]) -> SsiFit {
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a.data[i] as f64).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b.data[i] as f64).sum::<f64>() / n;
    let var: f64 = idx.iter().map(|&i| (a.data[i] as f64 - ma).powi(2)).sum();
    let cov: f64 = idx.iter().map(|&i| (a.data[i] as f64 - ma) * (b.data[i] as f64 - mb)).sum();
    if !(var > 1e-12 * n * (1.0 + ma * ma)) {
        return SsiFit { scale: 1.0, offset: 0.0, degenerate: true };
    }
    let scale = cov / var;
    SsiFit { scale, offset: mb - scale * ma, degenerate: false }
}

/// Returns `s·a + o` with `(s, o)` minimizing `‖s·a + o − b‖²` over masked pixels, one pair for
/// all channels.
pub fn ssi_align(a: &Image, b: &Image, mask: &Mask) -> Result<(Image, SsiFit)> {
    a.check_same_shape(b, "SSI target")?;
    mask.check_matches(a, "SSI mask")?;
    let idx = masked_indices(a, mask);
    if idx.is_empty() {
        return Err(Error::InvalidArgument("SSI mask selects no pixels".into()));
    }
    let f = fit(a, b, &idx);
    if f.degenerate {
        return Ok((a.clone(), f));
    }
    Ok((a.map(|v| (f.scale * v as f64 + f.offset) as f32), f))
}

/// Mean absolute difference over masked pixels and channels, with its gradient w.r.t. `a`.
fn l1(a: &Image, b: &Image, idx: &[usize]) -> (f64, Vec<f64>) {
    let n = idx.len() as f64;
    let mut g = vec![0.0; a.data.len()];
    let mut sum = 0.0;
    for &i in idx {
        let d = a.data[i] as f64 - b.data[i] as f64;
        sum += d.abs();
        g[i] = d.signum() * (d != 0.0) as u8 as f64 / n;
    }
    (sum / n, g)
}

/// `mean |s(a)·a + o(a) − b|` and its exact gradient w.r.t. `a`, through the fitted pair.
fn ssi_l1(a: &Image, b: &Image, idx: &[usize]) -> (f64, Vec<f64>, SsiFit) {
    let f = fit(a, b, idx);
    if f.degenerate {
        let (l, g) = l1(a, b, idx);
        return (l, g, f);
    }
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a.data[i] as f64).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b.data[i] as f64).sum::<f64>() / n;
    let var: f64 = idx.iter().map(|&i| (a.data[i] as f64 - ma).powi(2)).sum();
    let mut r = vec![0.0; a.data.len()];
    let mut sum = 0.0;
    for &i in idx {
        let d = f.scale * a.data[i] as f64 + f.offset - b.data[i] as f64;
        sum += d.abs();
        r[i] = d.signum() * (d != 0.0) as u8 as f64 / n;
    }
    let gs: f64 = idx.iter().map(|&i| r[i]).sum();
    let ga: f64 = idx.iter().map(|&i| r[i] * (a.data[i] as f64 - ma)).sum();
    let mut g = vec![0.0; a.data.len()];
    for &i in idx {
        let ds = ((b.data[i] as f64 - mb) - 2.0 * f.scale * (a.data[i] as f64 - ma)) / var;
        g[i] = f.scale * r[i] - f.scale * gs / n + ds * ga;
    }
    (sum / n, g, f)
}

/// Mean L1 of horizontal and vertical neighbour differences, over pairs whose texels both lie
/// in `footprint` (all pairs when `None`), with its texel gradient.
pub fn smoothness_loss(texture: &Image, footprint: Option<&Mask>) -> (f64, GradImage) {
    let (w, h, c) = (texture.width, texture.height, texture.channels);
    let mut g = GradImage::zeros(w, h, c);
    let inside = |p: usize| footprint.is_none_or(|m| m.data[p]);
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w && inside(p) && inside(p + 1) {
                pairs.push((p, p + 1));
            }
            if y + 1 < h && inside(p) && inside(p + w) {
                pairs.push((p, p + w));
            }
        }
    }
    if pairs.is_empty() {
        return (0.0, g);
    }
    let n = pairs.len() as f64;
    let mut sum = 0.0;
    for &(p, q) in &pairs {
        for k in 0..c {
            let d = texture.data[p * c + k] as f64 - texture.data[q * c + k] as f64;
            sum += d.abs();
            let s = d.signum() * (d != 0.0) as u8 as f64 / n;
            g.data[p * c + k] += s;
            g.data[q * c + k] -= s;
        }
    }
    (sum / n, g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub image: f64,
    pub albedo: f64,
    pub specular: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Textures entering the smoothness term, with the texels it is restricted to.
#[derive(Clone, Copy, Debug)]
pub struct SmoothnessInput<'a> {
    pub albedo: &'a Image,
    pub roughness: &'a Image,
    pub albedo_footprint: Option<&'a Mask>,
    pub roughness_footprint: Option<&'a Mask>,
}

#[derive(Clone, Debug)]
pub struct CoarseLoss {
    pub terms: LossTerms,
    pub pixel_grads: PixelLossGrads,
    /// Smoothness gradients, present when textures were supplied and `λ4 > 0`.
    pub d_albedo: Option<GradImage>,
    pub d_roughness: Option<GradImage>,
}

/// `λ1‖Î − I‖ + λ2‖SSI(k̂_d, k_d^s) − k_d^s‖ + λ3‖Ŝ_spec − S_spec^s‖ + λ4·L_smooth` for one view,
/// with the buffer gradients the renderer back-propagates and the texel gradients of the
/// smoothness term. Missing samples drop their terms.
pub fn loss_coarse(
    buffers: &RenderBuffers,
    observed: &Image,
    albedo_sample: Option<&Image>,
    specular_sample: Option<&Image>,
    weights: &LossWeights,
    mask: &Mask,
    smoothness: Option<SmoothnessInput>,
) -> Result<CoarseLoss> {
    weights.validate()?;
    observed.check_same_shape(&buffers.rgb, "observation")?;
    mask.check_matches(observed, "loss mask")?;
    let idx = masked_indices(observed, mask);
    if idx.is_empty() {
        return Err(Error::InvalidArgument("loss mask selects no pixels".into()));
    }
    let scaled = |g: Vec<f64>, l: f64| g.into_iter().map(|v| v * l).collect::<Vec<f64>>();
    let mut out = CoarseLoss {
        terms: LossTerms::default(),
        pixel_grads: PixelLossGrads::new(observed.width, observed.height),
        d_albedo: None,
        d_roughness: None,
    };
    let (terms, grads) = (&mut out.terms, &mut out.pixel_grads);
    if weights.lambda1 > 0.0 {
        let (l, g) = l1(&buffers.rgb, observed, &idx);
        terms.image = l;
        grads.rgb = Some(scaled(g, weights.lambda1));
    }
    if let Some(s) = albedo_sample.filter(|_| weights.lambda2 > 0.0) {
        s.check_same_shape(&buffers.albedo, "albedo sample")?;
        let (l, g, _) = ssi_l1(&buffers.albedo, s, &idx);
        terms.albedo = l;
        grads.albedo = Some(scaled(g, weights.lambda2));
    }
    if let Some(s) = specular_sample.filter(|_| weights.lambda3 > 0.0) {
        s.check_same_shape(&buffers.specular, "specular sample")?;
        let (l, g) = l1(&buffers.specular, s, &idx);
        terms.specular = l;
        grads.specular = Some(scaled(g, weights.lambda3));
    }
    if let Some(sm) = smoothness.filter(|_| weights.lambda4 > 0.0) {
        let (la, mut ga) = smoothness_loss(sm.albedo, sm.albedo_footprint);
        let (lr, mut gr) = smoothness_loss(sm.roughness, sm.roughness_footprint);
        terms.smooth = la + lr;
        ga.data.iter_mut().for_each(|v| *v *= weights.lambda4);
        gr.data.iter_mut().for_each(|v| *v *= weights.lambda4);
        out.d_albedo = Some(ga);
        out.d_roughness = Some(gr);
    }
    terms.total = weights.lambda1 * terms.image
        + weights.lambda2 * terms.albedo
        + weights.lambda3 * terms.specular
        + weights.lambda4 * terms.smooth;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.r#gen::<f32>()).collect()).unwrap()
    }

    fn buffers(rgb: Image, albedo: Image, specular: Image) -> RenderBuffers {
        let (w, h) = (rgb.width, rgb.height);
        RenderBuffers {
            diffuse: rgb.clone(),
            normal: rgb.clone(),
            rgb,
            albedo,
            specular,
            mask: Mask::new(w, h, true),
            discarded_samples: 0,
            total_samples: 0,
        }
    }

    #[test]
    fn ssi_closed_forms() {
        let a = random(6, 5, 3, 0);
        let m = Mask::new(6, 5, true);
        let (same, f) = ssi_align(&a, &a, &m).unwrap();
        assert!((f.scale - 1.0).abs() < 1e-9 && f.offset.abs() < 1e-9);
        for (x, y) in same.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-6);
        }
        let (back, _) = ssi_align(&a.map(|v| 2.0 * v + 3.0), &a, &m).unwrap();
        for (x, y) in back.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-6);
        }
        let flat = Image::filled(6, 5, &[0.3, 0.3, 0.3]);
        let (out, f) = ssi_align(&flat, &a, &m).unwrap();
        assert!(f.degenerate && out == flat);
    }

    #[test]
    fn ssi_recovers_noisy_affine_map() {
        let a = random(32, 32, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = a.map(|v| 0.5 * v - 1.0);
        b.data.iter_mut().for_each(|v| *v += 0.01 * rng.sample::<f32, _>(StandardNormal));
        let (_, f) = ssi_align(&a, &b, &Mask::new(32, 32, true)).unwrap();
        assert!((f.scale - 0.5).abs() < 0.02 && (f.offset + 1.0).abs() < 0.02, "{f:?}");
    }

    proptest! {
        #[test]
        fn ssi_affine_invariance(p in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], q in -2.0f64..2.0, seed in 0u64..50) {
            let a = random(8, 8, 3, seed);
            let b = random(8, 8, 3, seed + 100);
            let m = Mask::new(8, 8, true);
            let (x, _) = ssi_align(&a, &b, &m).unwrap();
            let (y, _) = ssi_align(&a.map(|v| (p * v as f64 + q) as f32), &b, &m).unwrap();
            for (u, v) in x.data.iter().zip(&y.data) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_cases() {
        let img = random(8, 8, 3, 3);
        let m = Mask::new(8, 8, true);
        let w = LossWeights::default();
        let b = buffers(img.clone(), img.clone(), img.clone());
        let flat = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
        let rough = Image::filled(4, 4, &[0.3]);
        let sm = SmoothnessInput { albedo: &flat, roughness: &rough, albedo_footprint: None, roughness_footprint: None };
        let t = loss_coarse(&b, &img, Some(&img), Some(&img), &w, &m, Some(sm)).unwrap().terms;
        assert!(t.total.abs() < 1e-6, "{t:?}");
        let mut bumpy = flat.clone();
        bumpy.set(1, 1, 0, 0.9);
        let sm = SmoothnessInput { albedo: &bumpy, ..sm };
        let t = loss_coarse(&b, &img, Some(&img), Some(&img), &w, &m, Some(sm)).unwrap().terms;
        let expected = w.lambda4 * smoothness_loss(&bumpy, None).0;
        assert!(expected > 0.0 && (t.total - expected).abs() < 1e-6, "{t:?}");
        let only = LossWeights { lambda1: 2.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 };
        let shifted = buffers(img.map(|v| v + 0.25), img.clone(), img.clone());
        let t = loss_coarse(&shifted, &img, None, None, &only, &m, None).unwrap().terms;
        assert!((t.total - 0.5).abs() < 1e-6);
        assert!(loss_coarse(&b, &img, None, None, &w, &Mask::new(8, 8, false), None).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let obs = random(8, 8, 3, 4);
        let alb_s = random(8, 8, 3, 5);
        let spec_s = random(8, 8, 3, 6);
        let b0 = buffers(random(8, 8, 3, 7), random(8, 8, 3, 8), random(8, 8, 3, 9));
        let mut m = Mask::new(8, 8, true);
        m.data[3] = false;
        let w = LossWeights::default();
        let g = loss_coarse(&b0, &obs, Some(&alb_s), Some(&spec_s), &w, &m, None).unwrap().pixel_grads;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-3f32;
        for _ in 0..10 {
            let i = rng.gen_range(0..192);
            if !m.data[i / 3] {
                continue;
            }
            for which in 0..3 {
                let eval = |d: f32| {
                    let mut b = b0.clone();
                    match which {
                        0 => b.rgb.data[i] += d,
                        1 => b.albedo.data[i] += d,
                        _ => b.specular.data[i] += d,
                    }
                    loss_coarse(&b, &obs, Some(&alb_s), Some(&spec_s), &w, &m, None).unwrap().terms.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                let an = match which {
                    0 => g.rgb.as_ref().unwrap()[i],
                    1 => g.albedo.as_ref().unwrap()[i],
                    _ => g.specular.as_ref().unwrap()[i],
                };
                assert!((fd - an).abs() < 1e-4 * an.abs().max(1e-3), "buffer {which} index {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn smoothness_cases() {
        let flat = Image::filled(5, 4, &[0.4]);
        assert_eq!(smoothness_loss(&flat, None).0, 0.0);
        let mut edge = flat.clone();
        edge.set(4, 2, 0, 0.4 + 0.3);
        let pairs = (4 * 4 + 5 * 3) as f64;
        let (l, _) = smoothness_loss(&edge, None);
        // The raised texel sits at the row end: one horizontal and two vertical neighbours.
        assert!((l - 3.0 * 0.3 / pairs).abs() < 1e-6);

        let tex = random(6, 5, 3, 11);
        let mut fp = Mask::new(6, 5, true);
        fp.data[7] = false;
        let (_, g) = smoothness_loss(&tex, Some(&fp));
        for i in [0, 13, 40, 77] {
            let eval = |d: f32| {
                let mut t = tex.clone();
                t.data[i] += d;
                smoothness_loss(&t, Some(&fp)).0
            };
            let h = 1e-4f32;
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            assert!((fd - g.data[i]).abs() < 1e-6 + 1e-3 * g.data[i].abs(), "{i}: {fd} vs {}", g.data[i]);
        }
    }
}
