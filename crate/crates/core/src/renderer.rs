//! Direct-illumination Monte-Carlo renderer with light/BRDF multiple importance sampling.
//!
//! Every sampling decision (lobe mixture, GGX sampling width, environment CDF) comes from a
//! *proposal* scene. `render` uses the scene itself; gradient code and finite-difference
//! checks pass a fixed proposal so the estimator stays linear in albedo and radiance.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{LobeChoice, SamplingLobes, pdf_lobes, sample_lobes, specular_terms};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::math::{Vec3, mix_seed};
use crate::scene_io::bvh::{Hit, Ray};
use crate::scene_io::camera::Camera;
use crate::scene_io::envmap::EnvironmentMap;
use crate::scene_io::formats::{write_pfm, write_png_preview};
use crate::scene_io::scene::Scene;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Mis,
    LightOnly,
    BrdfOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub spp: usize,
    /// Shadow rays per light sample. Only 1 is supported.
    pub max_shadow_rays: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub lobe: LobeChoice,
    /// Jitter primary rays inside the pixel footprint.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            spp: 144,
            max_shadow_rays: 1,
            seed: 0,
            strategy: Strategy::Mis,
            lobe: LobeChoice::Auto,
            jitter: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spp == 0 {
            return Err(Error::InvalidArgument("spp must be at least 1".into()));
        }
        if self.max_shadow_rays != 1 {
            return Err(Error::InvalidArgument("exactly one shadow ray per light sample is supported".into()));
        }
        Ok(())
    }
}

/// Per-view output. `diffuse` holds the full first integral (k_d included), so
/// `rgb = diffuse + specular` sample by sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub rgb: Image,
    pub diffuse: Image,
    pub specular: Image,
    pub albedo: Image,
    /// Unit shading normals in world space (may be negative).
    pub normal: Image,
    pub mask: Mask,
    pub discarded_samples: u64,
    pub total_samples: u64,
}

pub const BUFFER_FILES: [&str; 6] = ["rgb", "diffuse", "specular", "albedo", "normal", "mask"];

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Writes `<name>.pfm` and `<name>.png` for every buffer. Normals are stored as `n/2 + 1/2`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let normal = self.normal.map(|v| v * 0.5 + 0.5);
        let mask = self.mask.to_image();
        let images = [&self.rgb, &self.diffuse, &self.specular, &self.albedo, &normal, &mask];
        let mut out = Vec::new();
        for (name, img) in BUFFER_FILES.iter().zip(images) {
            let pfm = dir.join(format!("{name}.pfm"));
            write_pfm(img, &pfm)?;
            let png = dir.join(format!("{name}.png"));
            write_png_preview(img, &png)?;
            out.push(pfm);
            out.push(png);
        }
        Ok(out)
    }

    pub fn read(dir: &Path) -> Result<RenderBuffers> {
        use crate::scene_io::formats::read_pfm;
        let rgb = read_pfm(&dir.join("rgb.pfm"))?;
        let normal = read_pfm(&dir.join("normal.pfm"))?.map(|v| v * 2.0 - 1.0);
        let mask = Mask::from_image(&read_pfm(&dir.join("mask.pfm"))?);
        Ok(RenderBuffers {
            diffuse: read_pfm(&dir.join("diffuse.pfm"))?,
            specular: read_pfm(&dir.join("specular.pfm"))?,
            albedo: read_pfm(&dir.join("albedo.pfm"))?,
            rgb,
            normal,
            mask,
            discarded_samples: 0,
            total_samples: 0,
        })
    }
}

/// Balance heuristic.
pub fn mis_weight(pdf_this: f64, pdf_other: f64) -> f64 {
    let s = pdf_this + pdf_other;
    if s > 0.0 { (pdf_this / s).clamp(0.0, 1.0) } else { 0.0 }
}

/// One unoccluded environment lookup inside a sample, with the factors that multiply it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EnvRecord {
    pub dir: Vec3,
    /// Diffuse coefficient: contribution is `k_d ⊙ L · cd`.
    pub cd: f64,
    /// Specular coefficient: contribution is `L · cs`.
    pub cs: f64,
    /// `∂cs/∂ρ`.
    pub dcs: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleRecord {
    pub uv: [f64; 2],
    pub env: [Option<EnvRecord>; 2],
}

/// Everything the backward pass needs to replay a render without tracing rays.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// `samples[ranges[p].0 .. ranges[p].1]` belong to pixel `p`; each pixel is their mean.
    pub(crate) ranges: Vec<(u32, u32)>,
    pub(crate) samples: Vec<SampleRecord>,
}

impl Tape {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Double-precision accumulation of all buffers, before conversion to images.
#[derive(Clone, Debug)]
pub struct RawBuffers {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub diffuse: Vec<f64>,
    pub specular: Vec<f64>,
    pub albedo: Vec<f64>,
    pub normal: Vec<f64>,
    pub mask: Vec<bool>,
    pub discarded_samples: u64,
    pub total_samples: u64,
}

impl RawBuffers {
    pub fn to_buffers(&self) -> RenderBuffers {
        let img = |v: &[f64]| Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: v.iter().map(|&x| x as f32).collect(),
        };
        RenderBuffers {
            rgb: img(&self.rgb),
            diffuse: img(&self.diffuse),
            specular: img(&self.specular),
            albedo: img(&self.albedo),
            normal: img(&self.normal),
            mask: Mask { width: self.width, height: self.height, data: self.mask.clone() },
            discarded_samples: self.discarded_samples,
            total_samples: self.total_samples,
        }
    }
}

#[derive(Default)]
struct PixelOut {
    rgb: Vec3,
    diffuse: Vec3,
    specular: Vec3,
    albedo: Vec3,
    normal: Vec3,
    mask: bool,
    discarded: u32,
    total: u32,
    samples: Vec<SampleRecord>,
}

pub(crate) struct SurfacePoint {
    pub position: Vec3,
    pub shading_normal: Vec3,
    /// Geometric normal oriented toward the incoming ray.
    pub geometric_normal: Vec3,
    pub uv: [f64; 2],
}

pub(crate) fn surface_point(scene: &Scene, ray: &Ray, hit: &Hit) -> SurfacePoint {
    let mesh = scene.mesh();
    let tri = mesh.triangles[hit.triangle];
    let [i0, i1, i2] = tri.map(|i| i as usize);
    let b0 = 1.0 - hit.b1 - hit.b2;
    let [p0, p1, p2] = [mesh.positions[i0], mesh.positions[i1], mesh.positions[i2]];
    let position = p0 * b0 + p1 * hit.b1 + p2 * hit.b2;
    let mut ng = (p1 - p0).cross(p2 - p0).normalized();
    if ng.dot(ray.dir) > 0.0 {
        ng = -ng;
    }
    let mut ns = (mesh.normals[i0] * b0 + mesh.normals[i1] * hit.b1 + mesh.normals[i2] * hit.b2).normalized();
    if ns.dot(ng) < 0.0 {
        ns = -ns;
    }
    let uv = [
        mesh.uvs[i0][0] * b0 + mesh.uvs[i1][0] * hit.b1 + mesh.uvs[i2][0] * hit.b2,
        mesh.uvs[i0][1] * b0 + mesh.uvs[i1][1] * hit.b1 + mesh.uvs[i2][1] * hit.b2,
    ];
    SurfacePoint { position, shading_normal: ns, geometric_normal: ng, uv }
}

struct Context<'a> {
    scene: &'a Scene,
    proposal: &'a Scene,
    camera: &'a Camera,
    cfg: &'a RenderConfig,
    record: bool,
}

impl Context<'_> {
    fn visible(&self, sp: &SurfacePoint, wi: Vec3) -> bool {
        let eps = self.scene.geometry.epsilon;
        let offset = if sp.geometric_normal.dot(wi) >= 0.0 { sp.geometric_normal } else { -sp.geometric_normal };
        let ray = Ray { origin: sp.position + offset * eps, dir: wi };
        !self.scene.geometry.bvh.occluded(&ray, 0.0, f64::INFINITY)
    }

    fn shade_pixel(&self, x: usize, y: usize) -> PixelOut {
        let scene = self.scene;
        let cam = self.camera;
        let mut out = PixelOut::default();
        let bvh = &scene.geometry.bvh;
        let center = cam.generate_ray(x as f64 + 0.5, y as f64 + 0.5);
        let Some(center_hit) = bvh.intersect(&center, 0.0, f64::INFINITY) else {
            return out;
        };
        out.mask = true;
        out.normal = surface_point(scene, &center, &center_hit).shading_normal;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, (y * cam.width + x) as u64));
        let spp = self.cfg.spp;
        let mut kept = 0usize;
        let strategy = self.cfg.strategy;
        let penv = &self.proposal.env;
        let strata = Strata::new(spp, &mut rng);
        for k in 0..spp {
            let u = strata.sample(k);
            out.total += 1;
            let (jx, jy) = if self.cfg.jitter { (u[0], u[1]) } else { (0.5, 0.5) };
            let ray = cam.generate_ray(x as f64 + jx, y as f64 + jy);
            let Some(hit) = bvh.intersect(&ray, 0.0, f64::INFINITY) else {
                continue;
            };
            let sp = surface_point(scene, &ray, &hit);
            let wo = -ray.dir;
            // Interpolated normals can face away from the viewer near silhouettes.
            let n = if sp.shading_normal.dot(wo) > 0.0 { sp.shading_normal } else { sp.geometric_normal };
            let kd = Vec3::from_array(scene.albedo.sample(sp.uv));
            let rho = scene.roughness.sample(sp.uv)[0];
            let mut rec = SampleRecord { uv: sp.uv, env: [None, None] };
            let mut diff = Vec3::ZERO;
            let mut spec = Vec3::ZERO;

            if n.dot(wo) > 0.0 {
                let pkd = Vec3::from_array(self.proposal.albedo.sample(sp.uv));
                let prho = self.proposal.roughness.sample(sp.uv)[0];
                let choice = match (self.cfg.lobe, self.proposal.specular) {
                    (LobeChoice::Auto, false) => LobeChoice::Diffuse,
                    (c, _) => c,
                };
                let lobes = SamplingLobes::new(pkd, prho, choice);
                let spec_on = scene.specular;
                let specular = |wi: Vec3| {
                    if spec_on { specular_terms(n, wo, wi, rho, scene.f0) } else { Default::default() }
                };

                if strategy != Strategy::BrdfOnly {
                    let (wi, pdf_l) = penv.sample(u[2], u[3]);
                    let cos_i = n.dot(wi);
                    if pdf_l > 0.0 && cos_i > 0.0 && self.visible(&sp, wi) {
                        let w = match strategy {
                            Strategy::Mis => mis_weight(pdf_l, pdf_lobes(&lobes, n, wo, wi)),
                            _ => 1.0,
                        };
                        let s = specular(wi);
                        let k = w * cos_i / pdf_l;
                        rec.env[0] = Some(EnvRecord { dir: wi, cd: k / PI, cs: k * s.value, dcs: k * s.d_rho });
                    }
                }
                if strategy != Strategy::LightOnly {
                    if let Some((wi, _)) = sample_lobes(&lobes, n, wo, u[4], u[5], u[6]) {
                        let pdf_b = pdf_lobes(&lobes, n, wo, wi);
                        let cos_i = n.dot(wi);
                        if pdf_b > 0.0 && cos_i > 0.0 && self.visible(&sp, wi) {
                            let w = match strategy {
                                Strategy::Mis => mis_weight(pdf_b, penv.pdf(wi)),
                                _ => 1.0,
                            };
                            let s = specular(wi);
                            let k = w * cos_i / pdf_b;
                            rec.env[1] = Some(EnvRecord { dir: wi, cd: k / PI, cs: k * s.value, dcs: k * s.d_rho });
                        }
                    }
                }
                for r in rec.env.iter().flatten() {
                    let li = scene.env.lookup(r.dir);
                    diff += kd.hadamard(li) * r.cd;
                    spec += li * r.cs;
                }
            }
            let finite = diff.is_finite() && spec.is_finite() && rec.env.iter().flatten().all(|r| r.dcs.is_finite());
            if !finite {
                out.discarded += 1;
                continue;
            }
            kept += 1;
            out.diffuse += diff;
            out.specular += spec;
            out.albedo += kd;
            if self.record {
                out.samples.push(rec);
            }
        }
        // Average over the samples that landed on the surface.
        if kept > 0 {
            let inv = 1.0 / kept as f64;
            out.diffuse = out.diffuse * inv;
            out.specular = out.specular * inv;
            out.albedo = out.albedo * inv;
        }
        out.rgb = out.diffuse + out.specular;
        out
    }
}

/// Randomized quasi-Monte-Carlo uniforms for one pixel. Each 2-D pair (jitter, light, BRDF)
/// is a randomly shifted rank-1 lattice with generator close to `N/φ`, and the lobe
/// coordinate is a shifted 1-D grid. Every pair gets its own point order, so pairs are
/// decorrelated. Each point is marginally uniform, which keeps the estimator unbiased.
struct Strata {
    spp: usize,
    generator: usize,
    shifts: [[f64; 2]; 4],
    perms: [Vec<u32>; 4],
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lattice_generator(n: usize) -> usize {
    if n <= 2 {
        return 1;
    }
    let mut g = ((n as f64) * 0.5 * (5f64.sqrt() - 1.0)).round() as usize;
    while g > 1 && gcd(g, n) != 1 {
        g -= 1;
    }
    g.max(1)
}

impl Strata {
    fn new(spp: usize, rng: &mut ChaCha8Rng) -> Strata {
        let shifts = std::array::from_fn(|_| [rng.r#gen(), rng.r#gen()]);
        let perms = std::array::from_fn(|_| {
            let mut p: Vec<u32> = (0..spp as u32).collect();
            p.shuffle(rng);
            p
        });
        Strata { spp, generator: lattice_generator(spp), shifts, perms }
    }

    fn point(&self, pair: usize, k: usize) -> [f64; 2] {
        let i = self.perms[pair][k] as usize;
        let n = self.spp as f64;
        let s = self.shifts[pair];
        let a = (i as f64 / n + s[0]).fract();
        let b = (((i * self.generator) % self.spp) as f64 / n + s[1]).fract();
        [a, b]
    }

    fn sample(&self, k: usize) -> [f64; 7] {
        let [a, b] = self.point(0, k);
        let [c, d] = self.point(1, k);
        let [e, f] = self.point(2, k);
        let [lobe, _] = self.point(3, k);
        [a, b, c, d, e, f, lobe].map(|v| v.min(1.0 - f64::EPSILON / 2.0))
    }
}

/// Renders with `proposal` driving all sampling decisions. Optionally records a tape.
pub fn render_raw(
    scene: &Scene,
    proposal: &Scene,
    camera: &Camera,
    cfg: &RenderConfig,
    record: bool,
) -> Result<(RawBuffers, Option<Tape>)> {
    cfg.validate()?;
    camera.validate()?;
    let ctx = Context { scene, proposal, camera, cfg, record };
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<PixelOut>> =
        (0..h).into_par_iter().map(|y| (0..w).map(|x| ctx.shade_pixel(x, y)).collect()).collect();

    let n = w * h;
    let mut raw = RawBuffers {
        width: w,
        height: h,
        rgb: vec![0.0; n * 3],
        diffuse: vec![0.0; n * 3],
        specular: vec![0.0; n * 3],
        albedo: vec![0.0; n * 3],
        normal: vec![0.0; n * 3],
        mask: vec![false; n],
        discarded_samples: 0,
        total_samples: 0,
    };
    let mut tape = Tape { ranges: Vec::with_capacity(if record { n } else { 0 }), samples: Vec::new() };
    for (i, px) in rows.into_iter().flatten().enumerate() {
        raw.mask[i] = px.mask;
        raw.discarded_samples += px.discarded as u64;
        raw.total_samples += px.total as u64;
        for c in 0..3 {
            raw.rgb[i * 3 + c] = px.rgb[c];
            raw.diffuse[i * 3 + c] = px.diffuse[c];
            raw.specular[i * 3 + c] = px.specular[c];
            raw.albedo[i * 3 + c] = px.albedo[c];
            raw.normal[i * 3 + c] = px.normal[c];
        }
        if record {
            let start = tape.samples.len() as u32;
            tape.samples.extend_from_slice(&px.samples);
            tape.ranges.push((start, tape.samples.len() as u32));
        }
    }
    if raw.discarded_samples * 1000 > raw.total_samples {
        return Err(Error::TooManyInvalidSamples { discarded: raw.discarded_samples, total: raw.total_samples });
    }
    if raw.discarded_samples > 0 {
        log::warn!("discarded {} of {} samples as non-finite", raw.discarded_samples, raw.total_samples);
    }
    Ok((raw, record.then_some(tape)))
}

pub fn render(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> Result<RenderBuffers> {
    Ok(render_raw(scene, scene, camera, cfg, false)?.0.to_buffers())
}

pub fn render_with_proposal(scene: &Scene, proposal: &Scene, camera: &Camera, cfg: &RenderConfig) -> Result<RenderBuffers> {
    Ok(render_raw(scene, proposal, camera, cfg, false)?.0.to_buffers())
}

pub fn relight(scene: &Scene, new_env: &EnvironmentMap, camera: &Camera, cfg: &RenderConfig) -> Result<RenderBuffers> {
    render(&scene.with_env(new_env.clone()), camera, cfg)
}
