mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, PriorMode, RunConfig, ScenePreset};

/// Configuration or usage problem detected before any work starts (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "invrender", version, about = "Differentiable inverse rendering with diffusion priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to `$INVRENDER_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true, value_enum)]
    prior: Option<PriorMode>,
    /// Single worker thread; runs are bit-exact.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scene_preset: Option<ScenePreset>,
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    #[arg(long, global = true)]
    observations: Option<PathBuf>,
    #[arg(long, global = true)]
    estimate: Option<PathBuf>,
    #[arg(long, global = true)]
    env: Option<PathBuf>,
    #[arg(long, global = true)]
    spp: Option<usize>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[arg(long = "stage1-iters", global = true)]
    stage1_iters: Option<usize>,
    #[arg(long = "stage2-iters", global = true)]
    stage2_iters: Option<usize>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    lambda3: Option<f64>,
    #[arg(long, global = true)]
    lambda4: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long = "gamma-c", global = true)]
    gamma_c: Option<f64>,
    /// Number of prior samples for `sample-prior`.
    #[arg(long, global = true)]
    count: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render every camera of a scene.
    Render,
    /// Two-stage decomposition of posed observations.
    Decompose,
    /// Draw samples from a prior.
    SamplePrior,
    /// Train the toy albedo and specular priors on a bundle's training views.
    TrainPrior,
    /// Render an estimated scene under a new environment map.
    Relight,
    /// Score an estimated scene against a ground-truth bundle.
    Evaluate,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Write a synthetic ground-truth bundle.
    Generate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Render => "render",
            Command::Decompose => "decompose",
            Command::SamplePrior => "sample-prior",
            Command::TrainPrior => "train-prior",
            Command::Relight => "relight",
            Command::Evaluate => "evaluate",
            Command::Gradcheck => "gradcheck",
            Command::Generate => "generate",
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
    let c = common;
    macro_rules! set {
        ($flag:expr, $dst:expr) => {
            if let Some(v) = $flag.clone() {
                $dst = v;
            }
        };
    }
    set!(c.seed, cfg.seed);
    set!(c.prior, cfg.prior);
    set!(c.spp, cfg.render.spp);
    set!(c.spp, cfg.optim.spp);
    set!(c.image_size, cfg.image_size);
    set!(c.stage1_iters, cfg.optim.stage1_iterations);
    set!(c.stage2_iters, cfg.optim.stage2_iterations);
    set!(c.lambda1, cfg.optim.weights.lambda1);
    set!(c.lambda2, cfg.optim.weights.lambda2);
    set!(c.lambda3, cfg.optim.weights.lambda3);
    set!(c.lambda4, cfg.optim.weights.lambda4);
    set!(c.gamma, cfg.optim.guidance.gamma);
    set!(c.gamma_c, cfg.optim.guidance.gamma_c);
    set!(c.count, cfg.sample.count);
    for (flag, dst) in [
        (&c.out, &mut cfg.out),
        (&c.scene, &mut cfg.scene),
        (&c.bundle, &mut cfg.bundle),
        (&c.observations, &mut cfg.observations),
        (&c.estimate, &mut cfg.estimate),
        (&c.env, &mut cfg.env),
    ] {
        if flag.is_some() {
            *dst = flag.clone();
        }
    }
    if c.scene_preset.is_some() {
        cfg.scene_preset = c.scene_preset;
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    cfg.deterministic |= c.deterministic;
    cfg.propagate_seed();
    cfg.optim.validate().map_err(|e| UsageError(format!("invalid optimizer settings: {e}")))?;
    cfg.render.validate().map_err(|e| UsageError(format!("invalid render settings: {e}")))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut ctx = match run::RunContext::start(cli.command.name(), cfg) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let outcome = commands::dispatch(&cli.command, &mut ctx);
    let code = match &outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            if e.downcast_ref::<UsageError>().is_some() { ExitCode::from(2) } else { ExitCode::from(1) }
        }
    };
    if let Err(e) = ctx.finish(outcome.as_ref().err()) {
        eprintln!("error: cannot write manifest: {e:#}");
        return ExitCode::from(1);
    }
    code
}
