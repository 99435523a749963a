//! Image metrics computed over masked pixels.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn selected(mask: Option<&Mask>, p: usize) -> bool {
    mask.is_none_or(|m| m.data[p])
}

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    a.check_same_shape(b, "metric input")?;
    if let Some(m) = mask {
        m.check_matches(a, "metric mask")?;
    }
    Ok(())
}

/// Mean squared error over masked pixels and all channels.
pub fn mse(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let c = a.channels;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.pixel_count() {
        if selected(mask, p) {
            for k in 0..c {
                let d = a.data[p * c + k] as f64 - b.data[p * c + k] as f64;
                sum += d * d;
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("metric mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// 10·log10(peak²/MSE), capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("PSNR peak must be positive".into()));
    }
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of one channel, output `(w−10) × (h−10)`.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03, data range 1)
/// over windows whose centre pixel is masked, averaged over channels.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = (0..w * h).map(|p| a.data[p * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|p| b.data[p * c + ch] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let saa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let sbb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let sab = filter_valid(&prod(&pa, &pb), w, h, &k);
        for y in 0..oh {
            for x in 0..ow {
                if !selected(mask, (y + r) * w + x + r) {
                    continue;
                }
                let i = y * ow + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = saa[i] - ma * ma;
                let vb = sbb[i] - mb * mb;
                let cov = sab[i] - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("SSIM mask selects no window centres".into()));
    }
    Ok(total / count as f64)
}

/// Scales `pred` by one scalar so its masked mean over all channels matches `gt`. Returns the
/// input unchanged and `false` when the prediction's mean is zero.
pub fn align_mean_rgb(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<(Image, bool)> {
    check_pair(pred, gt, mask)?;
    let c = pred.channels;
    let (mut sp, mut sg) = (0.0, 0.0);
    for p in 0..pred.pixel_count() {
        if selected(mask, p) {
            for k in 0..c {
                sp += pred.data[p * c + k] as f64;
                sg += gt.data[p * c + k] as f64;
            }
        }
    }
    if sp == 0.0 || !sp.is_finite() {
        return Ok((pred.clone(), false));
    }
    let s = sg / sp;
    Ok((pred.map(|v| (v as f64 * s) as f32), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.r#gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random(8, 8, 3, 0);
        assert_eq!(psnr(&a, &a, None, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, None, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = random(8, 8, 3, 1);
        let mut mask = Mask::new(8, 8, false);
        for p in (0..64).step_by(3) {
            mask.data[p] = true;
        }
        let mut s = 0.0;
        let mut n = 0.0;
        for p in (0..64).step_by(3) {
            for k in 0..3 {
                s += (a.data[p * 3 + k] as f64 - c.data[p * 3 + k] as f64).powi(2);
                n += 1.0;
            }
        }
        let expect = 10.0 * (1.0 / (s / n)).log10();
        assert!((psnr(&a, &c, Some(&mask), 1.0).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &c, None, 1.0).unwrap(), psnr(&c, &a, None, 1.0).unwrap());
        assert!(psnr(&a, &c, Some(&Mask::new(8, 8, false)), 1.0).is_err());
    }

    /// Direct per-window evaluation of the SSIM formula.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let k1: Vec<f64> = gaussian_window();
        let mut total = 0.0;
        let mut n = 0.0;
        for ch in 0..a.channels {
            for y0 in 0..=a.height - 11 {
                for x0 in 0..=a.width - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let wgt = k1[i] * k1[j];
                            let p = a.get(x0 + i, y0 + j, ch) as f64;
                            let q = b.get(x0 + i, y0 + j, ch) as f64;
                            ma += wgt * p;
                            mb += wgt * q;
                            saa += wgt * p * p;
                            sbb += wgt * q * q;
                            sab += wgt * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    total += (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2)
                        / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                    n += 1.0;
                }
            }
        }
        total / n
    }

    #[test]
    fn ssim_cases() {
        let a = random(20, 16, 3, 2);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v), None).unwrap() < 1.0);
        let b = random(20, 16, 3, 3);
        assert!((ssim(&a, &b, None).unwrap() - reference_ssim(&a, &b)).abs() < 1e-4);
        assert!(ssim(&random(10, 20, 1, 0), &random(10, 20, 1, 1), None).is_err());
        let v = ssim(&a, &b, None).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn mean_rgb_alignment() {
        let gt = random(6, 6, 3, 4);
        let (two, ok) = align_mean_rgb(&gt.map(|v| 2.0 * v), &gt, None).unwrap();
        assert!(ok);
        for (x, y) in two.data.iter().zip(&gt.data) {
            assert!((x - y).abs() < 1e-6);
        }
        let (same, _) = align_mean_rgb(&gt, &gt, None).unwrap();
        assert_eq!(same, gt);
        let mut tinted = gt.clone();
        for p in tinted.data.chunks_mut(3) {
            p.swap(0, 2);
            p[0] *= 1.5;
        }
        let (aligned, _) = align_mean_rgb(&tinted, &gt, None).unwrap();
        let ratio = |img: &Image| {
            let r: f64 = img.data.chunks(3).map(|p| p[0] as f64).sum();
            let b: f64 = img.data.chunks(3).map(|p| p[2] as f64).sum();
            r / b
        };
        assert!((ratio(&aligned) - ratio(&tinted)).abs() < 1e-6);
        let (again, _) = align_mean_rgb(&aligned, &gt, None).unwrap();
        for (x, y) in again.data.iter().zip(&aligned.data) {
            assert!((x - y).abs() < 1e-6);
        }
        let zero = gt.map(|_| 0.0);
        assert!(!align_mean_rgb(&zero, &gt, None).unwrap().1);
    }
}
