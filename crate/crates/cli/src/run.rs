//! Run directory layout: resolved config, manifest of outputs and a tee'd log file.
//!
//! The manifest is `run_manifest.json` so it never collides with a bundle's `manifest.json`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

pub const OUT_ENV: &str = "INVRENDER_OUT";

struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    status: &'a str,
    error: Option<String>,
    outputs: Vec<String>,
}

pub struct RunContext {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub dir: PathBuf,
    outputs: Vec<PathBuf>,
}

fn default_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunContext {
    pub fn start(command: &'static str, mut cfg: RunConfig) -> anyhow::Result<RunContext> {
        let dir = cfg.out.clone().unwrap_or_else(|| default_root().join(command));
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
        cfg.out = Some(dir.clone());
        let log_path = dir.join("run.log");
        let file = File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?;
        let _ = env_logger::Builder::new()
            .filter_level(log::LevelFilter::Info)
            .parse_env("RUST_LOG")
            .target(env_logger::Target::Pipe(Box::new(Tee { file })))
            .try_init();
        let threads = if cfg.deterministic { Some(1) } else { cfg.workers };
        if let Some(n) = threads {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
        let config_path = dir.join("config.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(&cfg)?)
            .with_context(|| format!("cannot write {}", config_path.display()))?;
        log::info!("{command}: run directory {}, seed {}", dir.display(), cfg.seed);
        Ok(RunContext { command, cfg, dir, outputs: vec![config_path, log_path] })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn record_all(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    pub fn finish(self, error: Option<&anyhow::Error>) -> anyhow::Result<()> {
        let manifest_path = self.dir.join("run_manifest.json");
        let mut outputs: Vec<String> = self
            .outputs
            .iter()
            .chain(std::iter::once(&manifest_path))
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        outputs.sort();
        outputs.dedup();
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(|e| format!("{e:#}")),
            outputs,
        };
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&m)?)
            .with_context(|| format!("cannot write {}", manifest_path.display()))?;
        log::logger().flush();
        Ok(())
    }
}
