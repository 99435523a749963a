//! Simplified Disney BRDF: Lambert diffuse plus a GGX / Smith / Schlick specular lobe.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::math::{Frame, Vec3, cosine_hemisphere};

#[derive(Clone, Copy, Debug)]
pub struct ShadingPoint {
    pub position: Vec3,
    /// Unit shading normal.
    pub n: Vec3,
    /// Unit direction toward the viewer.
    pub wo: Vec3,
    pub kd: Vec3,
    pub rho: f64,
    pub f0: f64,
}

/// Forces one lobe in `sample_brdf`. Mostly useful for tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LobeChoice {
    #[default]
    Auto,
    Diffuse,
    Specular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lobe {
    Diffuse,
    Specular,
}

/// Parameters that drive BRDF sampling. Kept apart from the evaluated material so a
/// renderer can freeze its sampling decisions while the material changes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingLobes {
    pub p_diffuse: f64,
    pub alpha: f64,
}

impl SamplingLobes {
    pub fn new(kd: Vec3, rho: f64, choice: LobeChoice) -> SamplingLobes {
        let p_diffuse = match choice {
            LobeChoice::Auto => diffuse_probability(kd),
            LobeChoice::Diffuse => 1.0,
            LobeChoice::Specular => 0.0,
        };
        SamplingLobes { p_diffuse, alpha: rho * rho }
    }
}

pub fn diffuse_probability(kd: Vec3) -> f64 {
    let l = kd.luminance().max(0.0);
    (l / (l + 0.08)).clamp(0.1, 0.9)
}

pub fn eval_diffuse(p: &ShadingPoint) -> Vec3 {
    p.kd / PI
}

pub fn schlick(f0: f64, cos: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos.clamp(0.0, 1.0)).powi(5)
}

/// GGX normal distribution in terms of `a2 = α²`.
pub fn ggx_d(a2: f64, cos_h: f64) -> f64 {
    if cos_h <= 0.0 {
        return 0.0;
    }
    let b = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (PI * b * b)
}

fn smith_lambda(a2: f64, cos: f64) -> f64 {
    let c2 = cos * cos;
    let tan2 = (1.0 - c2).max(0.0) / c2;
    0.5 * (-1.0 + (1.0 + a2 * tan2).sqrt())
}

fn smith_lambda_da2(a2: f64, cos: f64) -> f64 {
    let c2 = cos * cos;
    let tan2 = (1.0 - c2).max(0.0) / c2;
    tan2 / (4.0 * (1.0 + a2 * tan2).sqrt())
}

/// Scalar specular value and its derivative with respect to roughness.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpecularEval {
    pub value: f64,
    pub d_rho: f64,
}

/// `D·G·F / (4 cos_o cos_i)` with `α = ρ²`, height-correlated Smith G and Schlick F.
pub fn specular_terms(n: Vec3, wo: Vec3, wi: Vec3, rho: f64, f0: f64) -> SpecularEval {
    let cos_o = n.dot(wo);
    let cos_i = n.dot(wi);
    if cos_o <= 0.0 || cos_i <= 0.0 {
        return SpecularEval::default();
    }
    let h = (wo + wi).normalized();
    let cos_h = n.dot(h).min(1.0);
    let a2 = rho.powi(4);
    let d = ggx_d(a2, cos_h);
    let lo = smith_lambda(a2, cos_o);
    let li = smith_lambda(a2, cos_i);
    let g = 1.0 / (1.0 + lo + li);
    let f = schlick(f0, wo.dot(h));
    let scale = f / (4.0 * cos_o * cos_i);
    let value = d * g * scale;

    let b = cos_h * cos_h * (a2 - 1.0) + 1.0;
    let dd = (b - 2.0 * a2 * cos_h * cos_h) / (PI * b * b * b);
    let dg = -g * g * (smith_lambda_da2(a2, cos_o) + smith_lambda_da2(a2, cos_i));
    let d_a2 = scale * (dd * g + d * dg);
    SpecularEval { value, d_rho: d_a2 * 4.0 * rho.powi(3) }
}

/// Specular BRDF as a spectrum. The Fresnel term is achromatic so all channels agree.
pub fn eval_specular(p: &ShadingPoint, wi: Vec3) -> Vec3 {
    Vec3::splat(specular_terms(p.n, p.wo, wi, p.rho, p.f0).value)
}

pub fn eval(p: &ShadingPoint, wi: Vec3) -> Vec3 {
    if p.n.dot(wi) <= 0.0 {
        return Vec3::ZERO;
    }
    eval_diffuse(p) + eval_specular(p, wi)
}

#[derive(Clone, Copy, Debug)]
pub struct BrdfSample {
    pub wi: Vec3,
    /// Mixture pdf in solid-angle measure.
    pub pdf: f64,
    pub f: Vec3,
    pub lobe: Lobe,
}

/// Draws a direction from the lobe mixture. Returns `None` when the sampled specular
/// reflection falls below the surface.
pub fn sample_lobes(lobes: &SamplingLobes, n: Vec3, wo: Vec3, u1: f64, u2: f64, u_lobe: f64) -> Option<(Vec3, Lobe)> {
    let frame = Frame::from_normal(n);
    if u_lobe < lobes.p_diffuse {
        let wi = frame.to_world(cosine_hemisphere(u1, u2));
        return Some((wi, Lobe::Diffuse));
    }
    let a2 = lobes.alpha * lobes.alpha;
    let tan2 = a2 * u1 / (1.0 - u1).max(1e-300);
    let cos_h = 1.0 / (1.0 + tan2).sqrt();
    let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    let h = frame.to_world(Vec3::new(sin_h * phi.cos(), sin_h * phi.sin(), cos_h));
    let wi = wo.reflect(h);
    if n.dot(wi) <= 0.0 {
        return None;
    }
    Some((wi, Lobe::Specular))
}

pub fn pdf_lobes(lobes: &SamplingLobes, n: Vec3, wo: Vec3, wi: Vec3) -> f64 {
    let cos_i = n.dot(wi);
    if cos_i <= 0.0 {
        return 0.0;
    }
    let mut pdf = lobes.p_diffuse * cos_i / PI;
    let p_spec = 1.0 - lobes.p_diffuse;
    if p_spec > 0.0 {
        let h = (wo + wi).normalized();
        let wo_h = wo.dot(h);
        if wo_h > 0.0 {
            let cos_h = n.dot(h).min(1.0);
            let a2 = lobes.alpha * lobes.alpha;
            pdf += p_spec * ggx_d(a2, cos_h) * cos_h / (4.0 * wo_h);
        }
    }
    pdf
}

pub fn sample_brdf_with(p: &ShadingPoint, choice: LobeChoice, u1: f64, u2: f64, u_lobe: f64) -> Option<BrdfSample> {
    let lobes = SamplingLobes::new(p.kd, p.rho, choice);
    let (wi, lobe) = sample_lobes(&lobes, p.n, p.wo, u1, u2, u_lobe)?;
    let pdf = pdf_lobes(&lobes, p.n, p.wo, wi);
    if !(pdf > 0.0) || !pdf.is_finite() {
        return None;
    }
    Some(BrdfSample { wi, pdf, f: eval(p, wi), lobe })
}

pub fn sample_brdf(p: &ShadingPoint, u1: f64, u2: f64, u_lobe: f64) -> Option<BrdfSample> {
    sample_brdf_with(p, LobeChoice::Auto, u1, u2, u_lobe)
}

pub fn pdf_brdf_with(p: &ShadingPoint, choice: LobeChoice, wi: Vec3) -> f64 {
    pdf_lobes(&SamplingLobes::new(p.kd, p.rho, choice), p.n, p.wo, wi)
}

pub fn pdf_brdf(p: &ShadingPoint, wi: Vec3) -> f64 {
    pdf_brdf_with(p, LobeChoice::Auto, wi)
}
