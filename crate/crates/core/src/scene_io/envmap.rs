//! Latitude-longitude environment maps with luminance importance sampling.
//!
//! Direction `d` maps to `u = atan2(d.x, -d.z) / 2π + 0.5`, `v = acos(d.y) / π`, so `+y` is the
//! top row. Lookups are bilinear, wrapping in `u` and clamping in `v`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Vec3, uniform_sphere};

pub fn direction_to_uv(d: Vec3) -> [f64; 2] {
    let u = d.x.atan2(-d.z) / (2.0 * PI) + 0.5;
    let v = d.y.clamp(-1.0, 1.0).acos() / PI;
    [u, v]
}

pub fn uv_to_direction(uv: [f64; 2]) -> Vec3 {
    let phi = (uv[0] - 0.5) * 2.0 * PI;
    let theta = uv[1] * PI;
    let s = theta.sin();
    Vec3::new(s * phi.sin(), theta.cos(), -s * phi.cos())
}

/// Distribution over texels proportional to luminance times texel solid angle. Inside a
/// texel, directions are uniform in solid angle (uniform in `cos θ` and `φ`), so the density
/// in the `(u, v)` square is proportional to `luminance · sin θ`.
#[derive(Clone, Debug)]
struct EnvDistribution {
    width: usize,
    height: usize,
    /// Row-conditional CDFs, `height` rows of `width + 1` entries.
    conditional: Vec<f64>,
    /// Marginal CDF over rows, `height + 1` entries.
    marginal: Vec<f64>,
    /// Luminance per texel.
    lum: Vec<f64>,
    /// `Σ luminance · solid angle`.
    total: f64,
}

fn row_cos_bounds(y: usize, h: usize) -> (f64, f64) {
    ((y as f64 / h as f64 * PI).cos(), ((y + 1) as f64 / h as f64 * PI).cos())
}

impl EnvDistribution {
    fn build(radiance: &Image) -> EnvDistribution {
        let (w, h) = (radiance.width, radiance.height);
        let mut lum = vec![0.0; w * h];
        let mut conditional = vec![0.0; h * (w + 1)];
        let mut row_sums = vec![0.0; h];
        let texel_solid_angle: Vec<f64> = (0..h)
            .map(|y| {
                let (ct, cb) = row_cos_bounds(y, h);
                2.0 * PI / w as f64 * (ct - cb)
            })
            .collect();
        for y in 0..h {
            let mut acc = 0.0;
            for x in 0..w {
                let p = radiance.pixel(x, y);
                let l = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64).luminance().max(0.0);
                lum[y * w + x] = l;
                acc += l;
                conditional[y * (w + 1) + x + 1] = acc;
            }
            row_sums[y] = acc * texel_solid_angle[y];
            let row = &mut conditional[y * (w + 1)..(y + 1) * (w + 1)];
            if acc > 0.0 {
                row.iter_mut().for_each(|c| *c /= acc);
            } else {
                row.iter_mut().enumerate().for_each(|(i, c)| *c = i as f64 / w as f64);
            }
            row[w] = 1.0;
        }
        let mut marginal = vec![0.0; h + 1];
        let mut acc = 0.0;
        for y in 0..h {
            acc += row_sums[y];
            marginal[y + 1] = acc;
        }
        let total = acc;
        if total > 0.0 {
            marginal.iter_mut().for_each(|c| *c /= total);
        }
        marginal[h] = 1.0;
        EnvDistribution { width: w, height: h, conditional, marginal, lum, total }
    }

    fn is_black(&self) -> bool {
        self.total <= 0.0
    }

    /// Direction and solid-angle pdf, or `None` for a black map.
    fn sample(&self, u1: f64, u2: f64) -> Option<(Vec3, f64)> {
        if self.is_black() {
            return None;
        }
        let (row, dv) = sample_cdf(&self.marginal, u1);
        let cond = &self.conditional[row * (self.width + 1)..(row + 1) * (self.width + 1)];
        let (col, du) = sample_cdf(cond, u2);
        let (ct, cb) = row_cos_bounds(row, self.height);
        let cos_theta = (ct - dv * (ct - cb)).clamp(-1.0, 1.0);
        let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
        let phi = ((col as f64 + du) / self.width as f64 - 0.5) * 2.0 * PI;
        let dir = Vec3::new(sin_theta * phi.sin(), cos_theta, -sin_theta * phi.cos());
        Some((dir, self.lum[row * self.width + col] / self.total))
    }

    fn pdf(&self, dir: Vec3) -> f64 {
        let [u, v] = direction_to_uv(dir);
        let x = ((u * self.width as f64) as usize).min(self.width - 1);
        let y = ((v * self.height as f64) as usize).min(self.height - 1);
        self.lum[y * self.width + x] / self.total
    }
}

/// Returns the bucket index and the offset within it for a uniform `u`.
fn sample_cdf(cdf: &[f64], u: f64) -> (usize, f64) {
    let n = cdf.len() - 1;
    // Last index i with cdf[i] <= u, skipping zero-mass buckets.
    let mut i = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(n - 1);
    while i + 1 < n && cdf[i + 1] <= cdf[i] {
        i += 1;
    }
    while i > 0 && cdf[i + 1] <= cdf[i] {
        i -= 1;
    }
    let width = cdf[i + 1] - cdf[i];
    let d = if width > 0.0 { ((u - cdf[i]) / width).clamp(0.0, 1.0 - 1e-12) } else { 0.5 };
    (i, d)
}

#[derive(Clone, Debug)]
pub struct EnvironmentMap {
    radiance: Image,
    dist: EnvDistribution,
}

/// Four `(pixel index, weight)` taps of a bilinear environment lookup.
pub type EnvTaps = [(usize, f64); 4];

impl EnvironmentMap {
    pub fn new(radiance: Image) -> Result<Self> {
        if radiance.channels != 3 || radiance.width == 0 || radiance.height == 0 {
            return Err(Error::InvalidImage("environment map must be a non-empty RGB image".into()));
        }
        if radiance.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidImage("environment radiance must be finite and nonnegative".into()));
        }
        let dist = EnvDistribution::build(&radiance);
        Ok(EnvironmentMap { radiance, dist })
    }

    pub fn constant(width: usize, height: usize, value: [f32; 3]) -> Self {
        EnvironmentMap::new(Image::filled(width, height, &value)).expect("constant radiance is valid")
    }

    pub fn radiance(&self) -> &Image {
        &self.radiance
    }

    pub fn width(&self) -> usize {
        self.radiance.width
    }

    pub fn height(&self) -> usize {
        self.radiance.height
    }

    /// Mutates the radiance, then restores the invariants (NaN and negatives to zero) and
    /// rebuilds the sampling distribution.
    pub fn update(&mut self, f: impl FnOnce(&mut Image)) {
        f(&mut self.radiance);
        for v in &mut self.radiance.data {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        self.dist = EnvDistribution::build(&self.radiance);
    }

    pub fn taps(&self, dir: Vec3) -> EnvTaps {
        let [u, v] = direction_to_uv(dir);
        let (w, h) = (self.width(), self.height());
        let fx = u * w as f64 - 0.5;
        let fy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x0f = fx.floor();
        let tx = fx - x0f;
        let x0 = (x0f as i64).rem_euclid(w as i64) as usize;
        let x1 = (x0 + 1) % w;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        [
            (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
            (y0 * w + x1, tx * (1.0 - ty)),
            (y1 * w + x0, (1.0 - tx) * ty),
            (y1 * w + x1, tx * ty),
        ]
    }

    pub fn lookup_with_taps(&self, taps: &EnvTaps) -> Vec3 {
        let mut out = Vec3::ZERO;
        for &(p, wgt) in taps {
            let px = &self.radiance.data[p * 3..p * 3 + 3];
            out += Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64) * wgt;
        }
        out
    }

    pub fn lookup(&self, dir: Vec3) -> Vec3 {
        self.lookup_with_taps(&self.taps(dir))
    }

    /// Importance-samples a direction; the pdf is in solid-angle measure.
    pub fn sample(&self, u1: f64, u2: f64) -> (Vec3, f64) {
        self.dist.sample(u1, u2).unwrap_or_else(|| (uniform_sphere(u1, u2), 1.0 / (4.0 * PI)))
    }

    pub fn pdf(&self, dir: Vec3) -> f64 {
        if self.dist.is_black() {
            return 1.0 / (4.0 * PI);
        }
        self.dist.pdf(dir)
    }

    /// Solid-angle weighted texel sum, the piecewise approximation of ∫ L dω.
    pub fn texel_integral(&self) -> Vec3 {
        let (w, h) = (self.width(), self.height());
        let mut acc = Vec3::ZERO;
        for y in 0..h {
            let sin_theta = ((y as f64 + 0.5) / h as f64 * PI).sin();
            let weight = 2.0 * PI * PI / (w * h) as f64 * sin_theta;
            for x in 0..w {
                let p = self.radiance.pixel(x, y);
                acc += Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) * weight;
            }
        }
        acc
    }

    /// Mean luminance weighted by solid angle.
    pub fn mean_luminance(&self) -> f64 {
        self.texel_integral().luminance() / (4.0 * PI)
    }

    /// Angular footprint test: does `dir` fall inside texel (`x`, `y`)?
    pub fn texel_of(&self, dir: Vec3) -> (usize, usize) {
        let [u, v] = direction_to_uv(dir);
        (
            ((u * self.width() as f64) as usize).min(self.width() - 1),
            ((v * self.height() as f64) as usize).min(self.height() - 1),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_env() -> EnvironmentMap {
        let (w, h) = (32, 16);
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let a = 0.2 + 2.0 * ((x as f32 / w as f32) * 6.0).sin().abs();
                img.pixel_mut(x, y).copy_from_slice(&[a, 0.5 * a + y as f32 * 0.1, 0.3]);
            }
        }
        EnvironmentMap::new(img).unwrap()
    }

    #[test]
    fn uv_direction_round_trip() {
        for uv in [[0.1, 0.2], [0.9, 0.7], [0.5, 0.5]] {
            let back = direction_to_uv(uv_to_direction(uv));
            assert!((back[0] - uv[0]).abs() < 1e-12 && (back[1] - uv[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_lookup() {
        let env = EnvironmentMap::constant(8, 4, [0.3, 0.6, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = uniform_sphere(rng.r#gen(), rng.r#gen());
            let v = env.lookup(d);
            assert!((v - Vec3::new(0.3, 0.6, 0.9)).length() < 1e-6);
        }
    }

    #[test]
    fn up_direction_reads_top_row() {
        let mut img = Image::new(4, 3, 3);
        for x in 0..4 {
            img.pixel_mut(x, 0).copy_from_slice(&[2.0, 2.0, 2.0]);
        }
        let env = EnvironmentMap::new(img).unwrap();
        assert!((env.lookup(Vec3::Y) - Vec3::splat(2.0)).length() < 1e-9);
    }

    #[test]
    fn rejects_negative_radiance() {
        assert!(EnvironmentMap::new(Image::filled(2, 2, &[0.0, -1.0, 0.0])).is_err());
    }

    #[test]
    fn black_map_falls_back_to_uniform() {
        let env = EnvironmentMap::constant(8, 4, [0.0; 3]);
        let (d, pdf) = env.sample(0.3, 0.7);
        assert!((d.length() - 1.0).abs() < 1e-12);
        assert!((pdf - 1.0 / (4.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn single_bright_texel_captures_all_samples() {
        let mut img = Image::new(16, 8, 3);
        img.pixel_mut(5, 2).copy_from_slice(&[10.0, 10.0, 10.0]);
        let env = EnvironmentMap::new(img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let (d, pdf) = env.sample(rng.r#gen(), rng.r#gen());
            assert_eq!(env.texel_of(d), (5, 2));
            assert!(pdf > 0.0);
        }
    }

    #[test]
    fn sampled_pdf_matches_pdf_function() {
        let env = gradient_env();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (d, pdf) = env.sample(rng.r#gen(), rng.r#gen());
            let p2 = env.pdf(d);
            assert!((pdf - p2).abs() <= 1e-6 * pdf.max(1.0), "{pdf} vs {p2}");
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        let env = gradient_env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let d = uniform_sphere(rng.r#gen(), rng.r#gen());
            acc += env.pdf(d) * 4.0 * PI;
        }
        let est = acc / n as f64;
        assert!((est - 1.0).abs() < 0.02, "{est}");
    }

    #[test]
    fn uniform_map_samples_uniform_directions() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let env = EnvironmentMap::constant(16, 8, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Equal-area bins: 8 bands in y (uniform on the sphere) times 8 in azimuth.
        let mut counts = vec![0f64; 64];
        let n = 200_000;
        for _ in 0..n {
            let (d, pdf) = env.sample(rng.r#gen(), rng.r#gen());
            assert!((pdf - 1.0 / (4.0 * PI)).abs() < 1e-12);
            let by = (((d.y + 1.0) / 2.0 * 8.0) as usize).min(7);
            let bp = (((d.z.atan2(d.x) + PI) / (2.0 * PI) * 8.0) as usize).min(7);
            counts[by * 8 + bp] += 1.0;
        }
        let e = n as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn inverse_pdf_sum_recovers_region_solid_angle() {
        let env = gradient_env();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        // Region: the cap y > 0.5, solid angle 2π(1 − 0.5) = π.
        let mut acc = 0.0;
        for _ in 0..n {
            let (d, pdf) = env.sample(rng.r#gen(), rng.r#gen());
            if d.y > 0.5 {
                acc += 1.0 / pdf;
            }
        }
        let est = acc / n as f64;
        assert!((est - PI).abs() < 0.02 * PI, "{est}");
    }

    #[test]
    fn lookup_integral_matches_texel_sum() {
        let env = gradient_env();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut acc = Vec3::ZERO;
        for _ in 0..n {
            acc += env.lookup(uniform_sphere(rng.r#gen(), rng.r#gen()));
        }
        let mc = acc * (4.0 * PI / n as f64);
        let oracle = env.texel_integral();
        for c in 0..3 {
            assert!((mc[c] - oracle[c]).abs() < 0.01 * oracle[c], "{c}: {} vs {}", mc[c], oracle[c]);
        }
    }

    #[test]
    fn update_restores_invariants() {
        let mut env = gradient_env();
        env.update(|img| img.data[0] = -5.0);
        assert_eq!(env.radiance().data[0], 0.0);
    }
}
