//! Pathwise gradients of rendered buffers with respect to albedo texels, roughness texels and
//! environment pixels, plus a seed-matched finite-difference checker.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::math::Vec3;
use crate::renderer::{RawBuffers, RenderBuffers, RenderConfig, Tape, render_raw};
use crate::scene_io::camera::Camera;
use crate::scene_io::scene::Scene;
use crate::scene_io::texture::ROUGHNESS_MIN;

/// Double-precision gradient with the shape of a texture or environment map.
#[derive(Clone, Debug, PartialEq)]
pub struct GradImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GradImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> GradImage {
        GradImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn add_scaled(&mut self, other: &GradImage, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub d_albedo: GradImage,
    pub d_roughness: GradImage,
    pub d_env: GradImage,
}

impl ParamGradients {
    pub fn zeros_for(scene: &Scene) -> ParamGradients {
        let a = &scene.albedo;
        let r = &scene.roughness;
        ParamGradients {
            d_albedo: GradImage::zeros(a.width(), a.height(), 3),
            d_roughness: GradImage::zeros(r.width(), r.height(), 1),
            d_env: GradImage::zeros(scene.env.width(), scene.env.height(), 3),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, s: f64) {
        self.d_albedo.add_scaled(&other.d_albedo, s);
        self.d_roughness.add_scaled(&other.d_roughness, s);
        self.d_env.add_scaled(&other.d_env, s);
    }

    pub fn is_finite(&self) -> bool {
        [&self.d_albedo, &self.d_roughness, &self.d_env].iter().all(|g| g.data.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        [&self.d_albedo, &self.d_roughness, &self.d_env].iter().all(|g| g.data.iter().all(|&v| v == 0.0))
    }
}

/// `∂Loss/∂buffer` for the buffers a loss reads, each `width × height × 3`. Missing buffers
/// contribute nothing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelLossGrads {
    pub width: usize,
    pub height: usize,
    pub rgb: Option<Vec<f64>>,
    pub diffuse: Option<Vec<f64>>,
    pub specular: Option<Vec<f64>>,
    pub albedo: Option<Vec<f64>>,
}

impl PixelLossGrads {
    pub fn new(width: usize, height: usize) -> PixelLossGrads {
        PixelLossGrads { width, height, ..Default::default() }
    }

    fn check(&self, w: usize, h: usize) -> Result<()> {
        if self.width != w || self.height != h {
            return Err(Error::ShapeMismatch(format!(
                "loss gradients are {}x{}, render is {w}x{h}",
                self.width, self.height
            )));
        }
        for v in [&self.rgb, &self.diffuse, &self.specular, &self.albedo].into_iter().flatten() {
            if v.len() != w * h * 3 {
                return Err(Error::ShapeMismatch("loss gradient buffer has the wrong length".into()));
            }
        }
        Ok(())
    }

    /// `Σ grads · buffers`, the scalar whose gradient `backward` computes.
    pub fn dot(&self, raw: &RawBuffers) -> f64 {
        let term = |g: &Option<Vec<f64>>, b: &[f64]| g.as_ref().map_or(0.0, |g| g.iter().zip(b).map(|(x, y)| x * y).sum());
        term(&self.rgb, &raw.rgb)
            + term(&self.diffuse, &raw.diffuse)
            + term(&self.specular, &raw.specular)
            + term(&self.albedo, &raw.albedo)
    }
}

fn pixel_vec(g: &Option<Vec<f64>>, p: usize) -> Vec3 {
    g.as_ref().map_or(Vec3::ZERO, |g| Vec3::new(g[p * 3], g[p * 3 + 1], g[p * 3 + 2]))
}

/// Scatters pixel loss gradients through a recorded tape. `scene` must be the scene the tape
/// was rendered with.
pub fn backward(scene: &Scene, tape: &Tape, grads: &PixelLossGrads) -> ParamGradients {
    let mut out = ParamGradients::zeros_for(scene);
    for (p, &(start, end)) in tape.ranges.iter().enumerate() {
        if start == end {
            continue;
        }
        let g_rgb = pixel_vec(&grads.rgb, p);
        let g_d = g_rgb + pixel_vec(&grads.diffuse, p);
        let g_s = g_rgb + pixel_vec(&grads.specular, p);
        let g_a = pixel_vec(&grads.albedo, p);
        if g_d == Vec3::ZERO && g_s == Vec3::ZERO && g_a == Vec3::ZERO {
            continue;
        }
        let inv = 1.0 / (end - start) as f64;
        for rec in &tape.samples[start as usize..end as usize] {
            let a_taps = scene.albedo.taps(rec.uv);
            let kd = Vec3::from_array(scene.albedo.sample_with_taps(&a_taps));
            let mut d_kd = g_a;
            let mut d_rho = 0.0;
            for r in rec.env.iter().flatten() {
                let e_taps = scene.env.taps(r.dir);
                let li = scene.env.lookup_with_taps(&e_taps);
                d_kd += g_d.hadamard(li) * r.cd;
                d_rho += g_s.dot(li) * r.dcs;
                let d_li = g_d.hadamard(kd) * r.cd + g_s * r.cs;
                for &(px, w) in &e_taps {
                    for c in 0..3 {
                        out.d_env.data[px * 3 + c] += d_li[c] * w * inv;
                    }
                }
            }
            for &(t, w) in &a_taps {
                for c in 0..3 {
                    out.d_albedo.data[t * 3 + c] += d_kd[c] * w * inv;
                }
            }
            if d_rho != 0.0 {
                for &(t, w) in &scene.roughness.taps(rec.uv) {
                    out.d_roughness.data[t] += d_rho * w * inv;
                }
            }
        }
    }
    out
}

/// Marks texels of the albedo and roughness textures reached by any bilinear tap on the tape.
pub fn uv_footprint(scene: &Scene, tape: &Tape, albedo: &mut Mask, roughness: &mut Mask) {
    for rec in &tape.samples {
        for &(t, w) in &scene.albedo.taps(rec.uv) {
            if w > 0.0 {
                albedo.data[t] = true;
            }
        }
        for &(t, w) in &scene.roughness.taps(rec.uv) {
            if w > 0.0 {
                roughness.data[t] = true;
            }
        }
    }
}

/// Renders with a tape and returns the buffers together with the parameter gradients of
/// `Σ pixel_loss_grads · buffers`.
pub fn render_with_grads(
    scene: &Scene,
    camera: &Camera,
    cfg: &RenderConfig,
    pixel_loss_grads: &PixelLossGrads,
) -> Result<(RenderBuffers, ParamGradients)> {
    render_with_grads_proposal(scene, scene, camera, cfg, pixel_loss_grads)
}

pub fn render_with_grads_proposal(
    scene: &Scene,
    proposal: &Scene,
    camera: &Camera,
    cfg: &RenderConfig,
    pixel_loss_grads: &PixelLossGrads,
) -> Result<(RenderBuffers, ParamGradients)> {
    pixel_loss_grads.check(camera.width, camera.height)?;
    let (raw, tape) = render_raw(scene, proposal, camera, cfg, true)?;
    let grads = backward(scene, &tape.expect("tape was requested"), pixel_loss_grads);
    Ok((raw.to_buffers(), grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRef {
    Albedo { texel: usize, channel: usize },
    Roughness { texel: usize },
    Env { pixel: usize, channel: usize },
}

impl ParamRef {
    pub fn kind(&self) -> &'static str {
        match self {
            ParamRef::Albedo { .. } => "albedo",
            ParamRef::Roughness { .. } => "roughness",
            ParamRef::Env { .. } => "env",
        }
    }

    fn read(&self, g: &ParamGradients) -> f64 {
        match *self {
            ParamRef::Albedo { texel, channel } => g.d_albedo.data[texel * 3 + channel],
            ParamRef::Roughness { texel } => g.d_roughness.data[texel],
            ParamRef::Env { pixel, channel } => g.d_env.data[pixel * 3 + channel],
        }
    }

    fn value(&self, scene: &Scene) -> f32 {
        match *self {
            ParamRef::Albedo { texel, channel } => scene.albedo.image.data[texel * 3 + channel],
            ParamRef::Roughness { texel } => scene.roughness.image.data[texel],
            ParamRef::Env { pixel, channel } => scene.env.radiance().data[pixel * 3 + channel],
        }
    }

    fn bounds(&self) -> (f32, f32) {
        match self {
            ParamRef::Albedo { .. } => (0.0, 1.0),
            ParamRef::Roughness { .. } => (ROUGHNESS_MIN, 1.0),
            ParamRef::Env { .. } => (0.0, f32::INFINITY),
        }
    }

    /// Copy of `scene` with this parameter set to `v`, bypassing range clamps.
    fn with_value(&self, scene: &Scene, v: f32) -> Scene {
        let mut s = scene.clone();
        match *self {
            ParamRef::Albedo { texel, channel } => s.albedo.image.data[texel * 3 + channel] = v,
            ParamRef::Roughness { texel } => s.roughness.image.data[texel] = v,
            ParamRef::Env { pixel, channel } => s.env.update(|img| img.data[pixel * 3 + channel] = v),
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A range bound forced a one-sided difference.
    pub one_sided: bool,
    /// The analytic gradient was zero, so `rel_error` holds the absolute error.
    pub absolute: bool,
}

impl FdEntry {
    /// Zero-gradient entries are judged on absolute error against 1e-6.
    pub fn passes(&self, tol: f64) -> bool {
        if self.absolute { self.rel_error < 1e-6 } else { self.rel_error < tol }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub h: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_error(&self, kind: &str) -> f64 {
        self.entries.iter().filter(|e| e.param.kind() == kind).fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("# h = {}\n{:<32} {:>16} {:>16} {:>12}  flags\n", self.h, "parameter", "analytic", "numeric", "rel_error");
        for e in &self.entries {
            let name = match e.param {
                ParamRef::Albedo { texel, channel } => format!("albedo[{texel}].{channel}"),
                ParamRef::Roughness { texel } => format!("roughness[{texel}]"),
                ParamRef::Env { pixel, channel } => format!("env[{pixel}].{channel}"),
            };
            let mut flags = Vec::new();
            if e.one_sided {
                flags.push("one-sided");
            }
            if e.absolute {
                flags.push("absolute");
            }
            let _ = writeln!(s, "{name:<32} {:>16.9e} {:>16.9e} {:>12.3e}  {}", e.analytic, e.numeric, e.rel_error, flags.join(","));
        }
        s
    }
}

/// Compares analytic gradients of `J = Σ weights · buffers` against central differences.
/// Both perturbed renders reuse the seed and the unperturbed scene as sampling proposal.
pub fn finite_diff_check(
    scene: &Scene,
    camera: &Camera,
    cfg: &RenderConfig,
    weights: &PixelLossGrads,
    params: &[ParamRef],
    h: f64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    weights.check(camera.width, camera.height)?;
    let (_, tape) = render_raw(scene, scene, camera, cfg, true)?;
    let analytic = backward(scene, &tape.expect("tape was requested"), weights);
    let objective = |s: &Scene| -> Result<f64> { Ok(weights.dot(&render_raw(s, scene, camera, cfg, false)?.0)) };
    let j0 = if params.is_empty() { 0.0 } else { objective(scene)? };

    let mut entries = Vec::with_capacity(params.len());
    for &param in params {
        let x = param.value(scene);
        let (lo, hi) = param.bounds();
        let up = x + h as f32;
        let dn = x - h as f32;
        let (numeric, one_sided) = if dn < lo {
            let xp = up;
            ((objective(&param.with_value(scene, xp))? - j0) / (xp as f64 - x as f64), true)
        } else if up > hi {
            let xm = dn;
            ((j0 - objective(&param.with_value(scene, xm))?) / (x as f64 - xm as f64), true)
        } else {
            let jp = objective(&param.with_value(scene, up))?;
            let jm = objective(&param.with_value(scene, dn))?;
            ((jp - jm) / (up as f64 - dn as f64), false)
        };
        let a = param.read(&analytic);
        let absolute = a == 0.0;
        let err = (a - numeric).abs();
        let rel_error = if absolute { err } else { err / a.abs().max(numeric.abs()) };
        entries.push(FdEntry { param, analytic: a, numeric, rel_error, one_sided, absolute });
    }
    Ok(FdReport { h, entries })
}

/// Draws `n` distinct parameters of `kind` whose gradient magnitude is at least `min_frac`
/// of the largest one.
pub fn pick_params(grads: &ParamGradients, kind: &str, n: usize, min_frac: f64, rng: &mut impl Rng) -> Vec<ParamRef> {
    let (g, channels) = match kind {
        "albedo" => (&grads.d_albedo, 3),
        "roughness" => (&grads.d_roughness, 1),
        _ => (&grads.d_env, 3),
    };
    let thresh = g.max_abs() * min_frac;
    let mut candidates: Vec<usize> = (0..g.data.len()).filter(|&i| g.data[i].abs() > 0.0 && g.data[i].abs() >= thresh).collect();
    let mut out = Vec::new();
    while out.len() < n && !candidates.is_empty() {
        let i = candidates.swap_remove(rng.gen_range(0..candidates.len()));
        out.push(match kind {
            "albedo" => ParamRef::Albedo { texel: i / channels, channel: i % channels },
            "roughness" => ParamRef::Roughness { texel: i },
            _ => ParamRef::Env { pixel: i / channels, channel: i % channels },
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::scene_io::envmap::EnvironmentMap;
    use crate::scene_io::mesh::uv_sphere;
    use crate::scene_io::scene::Geometry;
    use crate::scene_io::texture::{MaterialTexture, TextureKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Scene {
        let g = Geometry::new(uv_sphere(1.0, 16, 32)).unwrap();
        let mut alb = Image::new(8, 8, 3);
        let mut rough = Image::new(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                alb.pixel_mut(x, y).copy_from_slice(&[0.2 + 0.08 * x as f32, 0.5, 0.3 + 0.05 * y as f32]);
                rough.pixel_mut(x, y)[0] = 0.2 + 0.07 * y as f32;
            }
        }
        let mut sky = Image::new(16, 8, 3);
        for y in 0..8 {
            for x in 0..16 {
                let v = 0.3 + (y as f32 * 0.7 + x as f32 * 0.3).sin().abs();
                sky.pixel_mut(x, y).copy_from_slice(&[v, 0.8 * v, 0.6]);
            }
        }
        Scene::new(
            g,
            MaterialTexture::from_image(TextureKind::Albedo, alb).unwrap(),
            MaterialTexture::from_image(TextureKind::Roughness, rough).unwrap(),
            EnvironmentMap::new(sky).unwrap(),
        )
        .unwrap()
    }

    fn weights(w: usize, h: usize, seed: u64) -> PixelLossGrads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PixelLossGrads::new(w, h);
        g.rgb = Some((0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        g.specular = Some((0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        g.albedo = Some((0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        g
    }

    fn camera() -> Camera {
        Camera::look_at(Vec3::new(0.0, 1.0, 3.5), Vec3::ZERO, Vec3::Y, 40.0, 12, 12)
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let s = scene();
        let cfg = RenderConfig { spp: 4, ..Default::default() };
        let (_, g) = render_with_grads(&s, &camera(), &cfg, &PixelLossGrads::new(12, 12)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn seed_matched_differences_agree() {
        let s = scene();
        let cam = camera();
        let cfg = RenderConfig { spp: 4, seed: 11, ..Default::default() };
        let w = weights(12, 12, 1);
        let (_, g) = render_with_grads(&s, &cam, &cfg, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = pick_params(&g, "albedo", 4, 0.05, &mut rng);
        params.extend(pick_params(&g, "roughness", 4, 0.05, &mut rng));
        params.extend(pick_params(&g, "env", 4, 0.05, &mut rng));
        assert_eq!(params.len(), 12);
        let report = finite_diff_check(&s, &cam, &cfg, &w, &params, 1e-3).unwrap();
        assert!(report.max_rel_error("albedo") < 1e-6, "{}", report.to_table());
        assert!(report.max_rel_error("env") < 1e-6, "{}", report.to_table());
        assert!(report.max_rel_error("roughness") < 1e-2, "{}", report.to_table());
    }

    #[test]
    fn boundary_roughness_uses_one_sided_difference() {
        let mut s = scene();
        s.roughness.image.data.iter_mut().for_each(|v| *v = ROUGHNESS_MIN);
        let cam = camera();
        let cfg = RenderConfig { spp: 2, ..Default::default() };
        let w = weights(12, 12, 3);
        let (_, g) = render_with_grads(&s, &cam, &cfg, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = pick_params(&g, "roughness", 2, 0.0, &mut rng);
        let report = finite_diff_check(&s, &cam, &cfg, &w, &params, 1e-3).unwrap();
        assert!(report.entries.iter().all(|e| e.one_sided));
        assert!(report.to_table().contains("one-sided"));
    }

    #[test]
    fn untouched_texel_reports_absolute_error() {
        let s = scene();
        let cam = camera();
        let cfg = RenderConfig { spp: 2, ..Default::default() };
        let w = weights(12, 12, 5);
        let (_, g) = render_with_grads(&s, &cam, &cfg, &w).unwrap();
        // The camera sees the upper front of the sphere; the bottom row of the UV map is the south pole.
        let texel = 7 * 8 + 3;
        assert_eq!(g.d_albedo.data[texel * 3], 0.0);
        let report =
            finite_diff_check(&s, &cam, &cfg, &w, &[ParamRef::Albedo { texel, channel: 0 }], 1e-3).unwrap();
        let e = &report.entries[0];
        assert!(e.absolute && e.passes(1e-3), "{}", report.to_table());
    }
}
