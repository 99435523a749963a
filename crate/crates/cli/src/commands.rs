use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result, bail};
use invrender::archive::TensorArchive;
use invrender::diffusion::{GaussianOracle, NoiseSchedule, ScoreModel, ToyDenoiser, sample, train_toy_denoiser};
use invrender::evaluation::{GtBundle, evaluate_decomposition, generate_synthetic_scene, orbit_cameras, synthetic_scene};
use invrender::gradients::{PixelLossGrads, finite_diff_check, pick_params, render_with_grads};
use invrender::image::{Image, Mask};
use invrender::math::{Vec3, mix_seed};
use invrender::optimizer::{OptimState, Priors, View, stage1_optimize, stage2_optimize};
use invrender::renderer::{RenderConfig, render};
use invrender::scene_io::formats::read_hdr_image;
use invrender::scene_io::mesh::uv_sphere;
use invrender::scene_io::scene::{read_observation, write_scene};
use invrender::scene_io::{
    Camera, EnvironmentMap, Geometry, MaterialTexture, Scene, SceneDescription, TextureKind, read_pfm, write_pfm,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::Command;
use crate::UsageError;
use crate::config::{PriorMode, RunConfig, ScenePreset};
use crate::run::RunContext;

pub fn dispatch(cmd: &Command, ctx: &mut RunContext) -> Result<()> {
    match cmd {
        Command::Render => cmd_render(ctx),
        Command::Decompose => cmd_decompose(ctx),
        Command::SamplePrior => cmd_sample_prior(ctx),
        Command::TrainPrior => cmd_train_prior(ctx),
        Command::Relight => cmd_relight(ctx),
        Command::Evaluate => cmd_evaluate(ctx),
        Command::Gradcheck => cmd_gradcheck(ctx),
        Command::Generate => cmd_generate(ctx),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.exists() {
        return Err(usage(format!("{what} not found: {}", p.display())));
    }
    Ok(())
}

/// `path` may name a `scene.json` or a directory containing one.
fn scene_json(path: &Path) -> PathBuf {
    if path.is_dir() { path.join("scene.json") } else { path.to_path_buf() }
}

/// Parses a scene description and checks the files it references before loading anything.
fn load_scene_file(path: &Path) -> Result<(Scene, Vec<Camera>)> {
    let path = scene_json(path);
    require_file(&path, "scene description")?;
    let (desc, base) = SceneDescription::read(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    require_file(&resolve(&desc.mesh), "mesh")?;
    if let Some(c) = &desc.cameras {
        require_file(&resolve(c), "camera list")?;
    }
    for src in [&desc.albedo, &desc.roughness, &desc.env] {
        if let invrender::scene_io::scene::ImageSource::File(p) = src {
            require_file(&resolve(p), "image")?;
        }
    }
    let scene = desc.load(&base).with_context(|| format!("loading {}", path.display()))?;
    let cameras = desc.load_cameras(&base)?;
    Ok((scene, cameras))
}

fn front_camera(size: usize) -> Camera {
    Camera::look_at(Vec3::new(0.0, 0.0, 3.2), Vec3::ZERO, Vec3::Y, 40.0, size, size)
}

fn furnace_scene(cfg: &RunConfig) -> Result<Scene> {
    let mut scene = Scene::new(
        Geometry::new(uv_sphere(1.0, 48, 96))?,
        MaterialTexture::constant(TextureKind::Albedo, 8, 8, &[1.0, 1.0, 1.0])?,
        MaterialTexture::constant(TextureKind::Roughness, 8, 8, &[1.0])?,
        EnvironmentMap::constant(cfg.synthetic.env_resolution[0], cfg.synthetic.env_resolution[1], [1.0; 3]),
    )?;
    scene.specular = false;
    Ok(scene)
}

/// The scene selected by `scene` or `scene_preset`, with its cameras.
fn selected_scene(cfg: &RunConfig) -> Result<(Scene, Vec<Camera>)> {
    match (&cfg.scene, cfg.scene_preset) {
        (Some(_), Some(_)) => Err(usage("give either --scene or --scene-preset, not both")),
        (Some(p), None) => {
            let (scene, cams) = load_scene_file(p)?;
            if cams.is_empty() {
                return Err(usage(format!("{} lists no cameras", p.display())));
            }
            Ok((scene, cams))
        }
        (None, Some(ScenePreset::Furnace)) => Ok((furnace_scene(cfg)?, vec![front_camera(cfg.image_size)])),
        (None, Some(ScenePreset::Synthetic)) => {
            let spec = &cfg.synthetic;
            Ok((synthetic_scene(spec)?, orbit_cameras(spec.train_views, 0.0, spec)))
        }
        (None, None) => Err(usage("a scene is required: --scene PATH or --scene-preset NAME")),
    }
}

fn view_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed, i as u64)
}

fn render_all(ctx: &mut RunContext, scene: &Scene, cameras: &[Camera], under: &Path) -> Result<()> {
    for (i, cam) in cameras.iter().enumerate() {
        let rc = RenderConfig { seed: view_seed(ctx.cfg.render.seed, i), ..ctx.cfg.render.clone() };
        let b = render(scene, cam, &rc)?;
        if b.discarded_samples > 0 {
            log::warn!("view {i}: {} of {} samples discarded as non-finite", b.discarded_samples, b.total_samples);
        }
        let dir = under.join(format!("{i:03}"));
        let files = b.write(&dir)?;
        ctx.record_all(files);
        log::info!("view {i}: mean rgb over mask {:.5}", masked_mean(&b.rgb, &b.mask));
    }
    Ok(())
}

fn masked_mean(img: &Image, mask: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for p in 0..img.pixel_count() {
        if mask.data[p] {
            s += img.pixel(p % img.width, p / img.width).iter().map(|&v| v as f64).sum::<f64>() / img.channels as f64;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn cmd_render(ctx: &mut RunContext) -> Result<()> {
    let (scene, cameras) = selected_scene(&ctx.cfg)?;
    if ctx.cfg.scene_preset == Some(ScenePreset::Furnace) {
        // The furnace identity is a per-shading-point check; silhouette pixels with few
        // jittered hits only add noise.
        ctx.cfg.render.jitter = false;
    }
    let dir = ctx.dir.clone();
    render_all(ctx, &scene, &cameras, &dir)
}

fn cmd_generate(ctx: &mut RunContext) -> Result<()> {
    let spec = ctx.cfg.synthetic.clone();
    spec.validate().map_err(|e| usage(format!("invalid synthetic spec: {e}")))?;
    let bundle = generate_synthetic_scene(&spec)?;
    let m = bundle.write(&ctx.dir)?;
    ctx.record(m.scene.clone());
    ctx.record_all(m.train.iter().chain(&m.test).chain(&m.novel).cloned());
    ctx.record_all(m.previews.clone());
    log::info!("bundle with {} training and {} held-out views", m.train.len(), m.test.len());
    Ok(())
}

fn read_bundle(p: &Path) -> Result<GtBundle> {
    require_file(&p.join("manifest.json"), "bundle manifest")?;
    GtBundle::read(p).with_context(|| format!("reading bundle {}", p.display()))
}

/// Observations plus, where available, the ground-truth albedo and specular buffers.
struct Inputs {
    geometry: Arc<Geometry>,
    views: Vec<View>,
    albedo_gt: Option<Vec<Image>>,
    specular_gt: Option<Vec<Image>>,
    bundle: Option<GtBundle>,
}

fn decompose_inputs(cfg: &RunConfig) -> Result<Inputs> {
    if let Some(b) = &cfg.bundle {
        let bundle = read_bundle(b)?;
        let views = bundle
            .train_cameras
            .iter()
            .zip(&bundle.train)
            .map(|(c, t)| View::new(c.clone(), t.rgb.clone(), t.mask.clone()))
            .collect::<invrender::Result<Vec<_>>>()?;
        return Ok(Inputs {
            geometry: bundle.geometry(),
            albedo_gt: Some(bundle.train.iter().map(|t| t.albedo.clone()).collect()),
            specular_gt: Some(bundle.train.iter().map(|t| t.specular.clone()).collect()),
            views,
            bundle: Some(bundle),
        });
    }
    let (Some(scene_path), Some(obs)) = (&cfg.scene, &cfg.observations) else {
        return Err(usage("decompose needs --bundle DIR, or --scene PATH with --observations DIR"));
    };
    let (scene, cameras) = load_scene_file(scene_path)?;
    if cameras.is_empty() {
        return Err(usage(format!("{} lists no cameras", scene_path.display())));
    }
    let mut views = Vec::new();
    let (mut albedo, mut specular) = (Some(Vec::new()), Some(Vec::new()));
    for (i, cam) in cameras.iter().enumerate() {
        let dir = obs.join(format!("{i:03}"));
        let rgb_path = dir.join("rgb.pfm");
        require_file(&rgb_path, "observation")?;
        let rgb = read_observation(&rgb_path)?;
        let mask_path = dir.join("mask.pfm");
        let mask = if mask_path.exists() {
            Mask::from_image(&read_pfm(&mask_path)?)
        } else {
            Mask::new(rgb.width, rgb.height, true)
        };
        views.push(View::new(cam.clone(), rgb, mask)?);
        for (name, acc) in [("albedo", &mut albedo), ("specular", &mut specular)] {
            let p = dir.join(format!("{name}.pfm"));
            match (acc.as_mut(), p.exists()) {
                (Some(v), true) => v.push(read_pfm(&p)?),
                _ => *acc = None,
            }
        }
    }
    Ok(Inputs { geometry: scene.geometry.clone(), views, albedo_gt: albedo, specular_gt: specular, bundle: None })
}

fn load_toy(p: &Option<PathBuf>, what: &str) -> Result<Arc<dyn ScoreModel>> {
    let Some(p) = p else {
        return Err(usage(format!("prior mode toy needs `{what}` in the config")));
    };
    require_file(p, what)?;
    Ok(Arc::new(ToyDenoiser::load(p)?))
}

fn build_priors(cfg: &RunConfig, inputs: &Inputs) -> Result<Priors> {
    match cfg.prior {
        PriorMode::None => Ok(Priors::none()),
        PriorMode::Oracle => match (&inputs.albedo_gt, &inputs.specular_gt) {
            (Some(a), Some(s)) => Ok(Priors::oracle(a, s, cfg.oracle_noise)?),
            _ => Err(usage("oracle priors need ground-truth albedo.pfm and specular.pfm for every view")),
        },
        PriorMode::Toy => Ok(Priors::shared(
            load_toy(&cfg.albedo_model, "albedo_model")?,
            load_toy(&cfg.specular_model, "specular_model")?,
        )),
    }
}

fn cmd_decompose(ctx: &mut RunContext) -> Result<()> {
    let inputs = decompose_inputs(&ctx.cfg)?;
    let mut optim = ctx.cfg.optim.clone();
    if ctx.cfg.prior == PriorMode::None {
        optim.weights.lambda2 = 0.0;
        optim.weights.lambda3 = 0.0;
    }
    optim.dump_dir = Some(ctx.dir.clone());
    let priors = build_priors(&ctx.cfg, &inputs)?;
    log::info!("{} views, priors {priors:?}", inputs.views.len());

    let mut state = OptimState::initial(inputs.geometry.clone(), &inputs.views, &optim)?;
    stage1_optimize(&mut state, &inputs.views, &priors, &optim)?;
    let stage1 = ctx.path("stage1");
    state.save(&stage1)?;
    ctx.record(stage1);
    stage2_optimize(&mut state, &inputs.views, &priors, &optim)?;
    let fin = ctx.path("final");
    state.save(&fin)?;
    ctx.record(fin.clone());
    ctx.record(fin.join("loss.csv"));
    let cams: Vec<Camera> = inputs.views.iter().map(|v| v.camera.clone()).collect();
    let scene_path = write_scene(&state.scene, &cams, &ctx.path("estimate"))?;
    ctx.record(scene_path);

    if let Some(bundle) = &inputs.bundle {
        write_report(ctx, &state.scene, bundle)?;
    }
    Ok(())
}

fn write_report(ctx: &mut RunContext, scene: &Scene, bundle: &GtBundle) -> Result<()> {
    let report = evaluate_decomposition(scene, bundle)?;
    let json = ctx.path("report.json");
    std::fs::write(&json, report.to_json()?)?;
    let txt = ctx.path("report.txt");
    std::fs::write(&txt, report.to_table())?;
    log::info!(
        "aligned albedo PSNR {:.3} dB, roughness MSE {:.5}, relight PSNR {:.3} dB",
        report.aligned_albedo_psnr,
        report.roughness_mse,
        report.relight_psnr
    );
    ctx.record(json);
    ctx.record(txt);
    Ok(())
}

fn cmd_evaluate(ctx: &mut RunContext) -> Result<()> {
    let (Some(est), Some(b)) = (ctx.cfg.estimate.clone(), ctx.cfg.bundle.clone()) else {
        return Err(usage("evaluate needs --estimate PATH and --bundle DIR"));
    };
    let (scene, _) = load_scene_file(&est)?;
    let bundle = read_bundle(&b)?;
    write_report(ctx, &scene, &bundle)
}

fn cmd_relight(ctx: &mut RunContext) -> Result<()> {
    let (Some(est), Some(env)) = (ctx.cfg.estimate.clone(), ctx.cfg.env.clone()) else {
        return Err(usage("relight needs --estimate PATH and --env FILE"));
    };
    let (scene, cameras) = load_scene_file(&est)?;
    if cameras.is_empty() {
        return Err(usage(format!("{} lists no cameras", est.display())));
    }
    require_file(&env, "environment map")?;
    let env = EnvironmentMap::new(read_hdr_image(&env)?)?;
    let relit = scene.with_env(env);
    let dir = ctx.dir.clone();
    render_all(ctx, &relit, &cameras, &dir)
}

fn sample_moments(samples: &[Image]) -> (Image, Image) {
    let n = samples.len() as f64;
    let first = &samples[0];
    let mut mean = vec![0.0f64; first.data.len()];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(&s.data) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; first.data.len()];
    for s in samples {
        for ((q, &v), m) in var.iter_mut().zip(&s.data).zip(&mean) {
            *q += (v as f64 - m).powi(2) / (n - 1.0).max(1.0);
        }
    }
    let img = |d: Vec<f64>| Image::from_data(first.width, first.height, first.channels, d.into_iter().map(|v| v as f32).collect());
    (img(mean).expect("shape"), img(var).expect("shape"))
}

fn cmd_sample_prior(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg.sample.clone();
    if cfg.count == 0 {
        return Err(usage("sample count must be positive"));
    }
    let schedule: NoiseSchedule = ctx.cfg.optim.schedule.build()?;
    let (model, condition, (w, h)): (Arc<dyn ScoreModel>, Option<Image>, _) = match ctx.cfg.prior {
        PriorMode::Oracle => {
            let mu = match &cfg.mu {
                Some(p) => {
                    require_file(p, "oracle mean")?;
                    read_pfm(p)?
                }
                None => Image::filled(cfg.width, cfg.height, &cfg.mu_value),
            };
            let shape = (mu.width, mu.height);
            (Arc::new(GaussianOracle::isotropic(mu, cfg.variance)?), None, shape)
        }
        PriorMode::Toy => {
            let model = load_toy(&ctx.cfg.albedo_model, "albedo_model")?;
            let Some(c) = &cfg.condition else {
                return Err(usage("toy prior sampling needs `sample.condition`"));
            };
            require_file(c, "condition image")?;
            let c = read_observation(c)?;
            let shape = (c.width, c.height);
            (model, Some(c), shape)
        }
        PriorMode::None => return Err(usage("sample-prior needs --prior oracle or toy")),
    };
    let seed = ctx.cfg.seed;
    let samples: Vec<Image> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            sample(model.as_ref(), (w, h, 3), condition.as_ref(), &schedule, &mut rng)
        })
        .collect::<invrender::Result<_>>()?;
    // PFM holds nonnegative values only, so the raw draws go to an archive and the PFMs are
    // clamped at zero.
    let mut archive = TensorArchive::new();
    for (i, s) in samples.iter().enumerate() {
        archive.push(&format!("sample.{i}"), &[s.height, s.width, s.channels], s.data.clone())?;
        let p = ctx.path(format!("sample_{i:03}.pfm"));
        write_pfm(&s.map(|v| v.max(0.0)), &p)?;
        ctx.record(p);
    }
    let p = ctx.path("samples.bin");
    archive.write(&p)?;
    ctx.record(p);
    let (mean, var) = sample_moments(&samples);
    for (name, img) in [("mean.pfm", &mean), ("variance.pfm", &var)] {
        let p = ctx.path(name);
        write_pfm(&img.map(|v| v.max(0.0)), &p)?;
        ctx.record(p);
    }
    log::info!("{} samples, mean {:.5}, mean variance {:.6}", samples.len(), mean.mean(), var.mean());
    Ok(())
}

fn cmd_train_prior(ctx: &mut RunContext) -> Result<()> {
    let Some(b) = ctx.cfg.bundle.clone() else {
        return Err(usage("train-prior needs --bundle DIR"));
    };
    let bundle = read_bundle(&b)?;
    let toy = ctx.cfg.toy.clone();
    let mut reports = serde_json::Map::new();
    for (name, pick) in [("albedo", 0usize), ("specular", 1)] {
        let data: Vec<(Image, Image)> = bundle
            .train
            .iter()
            .map(|t| (t.rgb.clone(), if pick == 0 { t.albedo.clone() } else { t.specular.clone() }))
            .collect();
        let (model, report) = train_toy_denoiser(&data, &toy)?;
        log::info!("{name} prior: loss {:.5} -> {:.5}", report.initial_loss, report.final_loss);
        let p = ctx.path(format!("{name}_model.bin"));
        model.save(&p)?;
        ctx.record(p);
        reports.insert(name.into(), serde_json::to_value(&report)?);
    }
    let p = ctx.path("train_report.json");
    std::fs::write(&p, serde_json::to_string_pretty(&reports)?)?;
    ctx.record(p);
    Ok(())
}

fn cmd_gradcheck(ctx: &mut RunContext) -> Result<()> {
    let gc = ctx.cfg.gradcheck.clone();
    let (scene, camera) = match (&ctx.cfg.scene, ctx.cfg.scene_preset) {
        (None, None) => {
            let mut spec = ctx.cfg.synthetic.clone();
            spec.texture_resolution = spec.texture_resolution.min(64);
            (synthetic_scene(&spec)?, front_camera(gc.image_size))
        }
        _ => {
            let (scene, cams) = selected_scene(&ctx.cfg)?;
            (scene, cams[0].clone())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ctx.cfg.seed, 0x6C));
    let n = camera.width * camera.height * 3;
    let mut weights = PixelLossGrads::new(camera.width, camera.height);
    weights.rgb = Some((0..n).map(|_| rng.r#gen::<f64>() - 0.5).collect());
    weights.specular = Some((0..n).map(|_| rng.r#gen::<f64>() - 0.5).collect());
    weights.albedo = Some((0..n).map(|_| rng.r#gen::<f64>() - 0.5).collect());
    let rc = ctx.cfg.render.clone();
    let (_, grads) = render_with_grads(&scene, &camera, &rc, &weights)?;
    let mut params = Vec::new();
    for kind in ["albedo", "roughness", "env"] {
        params.extend(pick_params(&grads, kind, gc.params, 0.05, &mut rng));
    }
    let report = finite_diff_check(&scene, &camera, &rc, &weights, &params, gc.h)?;
    let txt = ctx.path("gradcheck.txt");
    std::fs::write(&txt, report.to_table())?;
    let json = ctx.path("gradcheck.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
    ctx.record(txt);
    ctx.record(json);
    let mut failed = Vec::new();
    for (kind, tol) in [("albedo", gc.tolerance_albedo), ("roughness", gc.tolerance_roughness), ("env", gc.tolerance_env)] {
        let bad = report.entries.iter().filter(|e| e.param.kind() == kind && !e.passes(tol)).count();
        log::info!("{kind}: max relative error {:.3e} (tolerance {tol:.0e}), {bad} failing", report.max_rel_error(kind));
        if bad > 0 {
            failed.push(kind);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
