//! Learnable UV-space material textures with bilinear, clamp-to-edge filtering.
//!
//! Texel `(x, y)` covers `u ∈ [x/W, (x+1)/W)` and `v ∈ [y/H, (y+1)/H)`, with row 0 at `v = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const ROUGHNESS_MIN: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    /// Three channels in [0, 1].
    Albedo,
    /// One channel in [ROUGHNESS_MIN, 1].
    Roughness,
}

impl TextureKind {
    pub fn channels(self) -> usize {
        match self {
            TextureKind::Albedo => 3,
            TextureKind::Roughness => 1,
        }
    }

    pub fn range(self) -> (f32, f32) {
        match self {
            TextureKind::Albedo => (0.0, 1.0),
            TextureKind::Roughness => (ROUGHNESS_MIN, 1.0),
        }
    }
}

/// Four texel taps `(texel index, weight)` with weights summing to one.
pub type BilinearTaps = [(usize, f64); 4];

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialTexture {
    pub kind: TextureKind,
    pub image: Image,
}

impl MaterialTexture {
    pub fn constant(kind: TextureKind, width: usize, height: usize, value: &[f32]) -> Result<Self> {
        if value.len() != kind.channels() {
            return Err(Error::ShapeMismatch(format!("{kind:?} texture needs {} channels", kind.channels())));
        }
        let mut tex = MaterialTexture { kind, image: Image::filled(width, height, value) };
        tex.clamp();
        Ok(tex)
    }

    /// Wraps an image, clamping it into the kind's valid range.
    pub fn from_image(kind: TextureKind, image: Image) -> Result<Self> {
        if image.channels != kind.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{kind:?} texture needs {} channels, image has {}",
                kind.channels(),
                image.channels
            )));
        }
        if image.width == 0 || image.height == 0 {
            return Err(Error::InvalidImage("texture must be at least 1x1".into()));
        }
        let mut tex = MaterialTexture { kind, image };
        tex.clamp();
        Ok(tex)
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn channels(&self) -> usize {
        self.image.channels
    }

    pub fn texel_count(&self) -> usize {
        self.image.pixel_count()
    }

    /// Restores the range invariant. NaN texels are reset to the lower bound.
    pub fn clamp(&mut self) {
        let (lo, hi) = self.kind.range();
        for v in &mut self.image.data {
            *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        }
    }

    pub fn in_range(&self) -> bool {
        let (lo, hi) = self.kind.range();
        self.image.data.iter().all(|&v| v >= lo && v <= hi)
    }

    pub fn taps(&self, uv: [f64; 2]) -> BilinearTaps {
        bilinear_taps(uv, self.width(), self.height())
    }

    /// Bilinear lookup; returns up to three channels (unused ones are zero).
    pub fn sample(&self, uv: [f64; 2]) -> [f64; 3] {
        self.sample_with_taps(&self.taps(uv))
    }

    pub fn sample_with_taps(&self, taps: &BilinearTaps) -> [f64; 3] {
        let c = self.channels();
        let mut out = [0.0; 3];
        for &(texel, w) in taps {
            let base = texel * c;
            for (k, o) in out.iter_mut().enumerate().take(c) {
                *o += w * self.image.data[base + k] as f64;
            }
        }
        out
    }
}

/// Bilinear taps with clamp-to-edge addressing for a `width`x`height` grid.
pub fn bilinear_taps(uv: [f64; 2], width: usize, height: usize) -> BilinearTaps {
    let fx = (uv[0] * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (uv[1] * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (fx.floor() as usize).min(width - 1);
    let y0 = (fy.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    [
        (y0 * width + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * width + x1, tx * (1.0 - ty)),
        (y1 * width + x0, (1.0 - tx) * ty),
        (y1 * width + x1, tx * ty),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> MaterialTexture {
        let img = Image::from_data(4, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        MaterialTexture::from_image(TextureKind::Roughness, img).unwrap()
    }

    #[test]
    fn constant_texture_returns_constant() {
        let tex = MaterialTexture::constant(TextureKind::Albedo, 5, 3, &[0.2, 0.4, 0.6]).unwrap();
        for uv in [[0.0, 0.0], [0.33, 0.9], [1.0, 1.0], [-3.0, 7.0]] {
            let v = tex.sample(uv);
            assert!((v[0] - 0.2).abs() < 1e-7 && (v[1] - 0.4).abs() < 1e-7 && (v[2] - 0.6).abs() < 1e-7);
        }
    }

    #[test]
    fn texel_center_returns_texel() {
        let tex = ramp();
        let v = tex.sample([(2.0 + 0.5) / 4.0, (1.0 + 0.5) / 2.0]);
        assert!((v[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn midpoint_between_texels() {
        let tex = ramp();
        let v = tex.sample([2.0 / 4.0, 0.5 / 2.0]);
        assert!((v[0] - (0.2 + 0.3) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn clamp_enforces_ranges() {
        let img = Image::from_data(2, 1, 1, vec![-1.0, 5.0]).unwrap();
        let tex = MaterialTexture::from_image(TextureKind::Roughness, img).unwrap();
        assert_eq!(tex.image.data, vec![ROUGHNESS_MIN, 1.0]);
        let img = Image::from_data(1, 1, 3, vec![f32::NAN, 2.0, 0.5]).unwrap();
        let tex = MaterialTexture::from_image(TextureKind::Albedo, img).unwrap();
        assert_eq!(tex.image.data, vec![0.0, 1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn sample_is_bounded_by_contributing_texels(u in -0.2f64..1.2, v in -0.2f64..1.2) {
            let tex = ramp();
            let taps = tex.taps([u, v]);
            let wsum: f64 = taps.iter().map(|t| t.1).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
            let vals: Vec<f64> = taps.iter().map(|t| tex.image.data[t.0] as f64).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = tex.sample([u, v])[0];
            prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
            prop_assert_eq!(s, tex.sample([u, v])[0]);
        }
    }
}
