//! Run configuration: preset defaults, then the JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use invrender::diffusion::ToyConfig;
use invrender::evaluation::SyntheticSpec;
use invrender::optimizer::OptimConfig;
use invrender::renderer::RenderConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    #[default]
    Oracle,
    Toy,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    /// Unit-albedo Lambertian sphere under a uniform unit environment, rendered through pixel
    /// centres.
    Furnace,
    /// The synthetic scene described by the `synthetic` section.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplePriorConfig {
    pub count: usize,
    /// Oracle mean image; a constant `mu_value` image of `width × height` when absent.
    pub mu: Option<PathBuf>,
    pub mu_value: [f32; 3],
    pub variance: f32,
    pub width: usize,
    pub height: usize,
    /// Conditioning image for learned priors.
    pub condition: Option<PathBuf>,
}

impl Default for SamplePriorConfig {
    fn default() -> Self {
        SamplePriorConfig {
            count: 16,
            mu: None,
            mu_value: [0.5, 0.5, 0.5],
            variance: 0.01,
            width: 32,
            height: 32,
            condition: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Parameters sampled per kind (albedo, roughness, environment).
    pub params: usize,
    pub h: f64,
    pub image_size: usize,
    pub tolerance_albedo: f64,
    pub tolerance_roughness: f64,
    pub tolerance_env: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            params: 20,
            h: 1e-3,
            image_size: 32,
            tolerance_albedo: 1e-3,
            tolerance_roughness: 1e-2,
            tolerance_env: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub deterministic: bool,
    /// Scene description (`scene.json`).
    pub scene: Option<PathBuf>,
    pub scene_preset: Option<ScenePreset>,
    /// Ground-truth bundle directory written by `generate`.
    pub bundle: Option<PathBuf>,
    /// Directory of `NNN/rgb.pfm` and `NNN/mask.pfm`, one per scene camera.
    pub observations: Option<PathBuf>,
    /// Image size of preset-scene cameras.
    pub image_size: usize,
    pub render: RenderConfig,
    pub optim: OptimConfig,
    pub prior: PriorMode,
    /// Oracle noise relative to each buffer's mean.
    pub oracle_noise: f32,
    pub albedo_model: Option<PathBuf>,
    pub specular_model: Option<PathBuf>,
    pub toy: ToyConfig,
    pub synthetic: SyntheticSpec,
    pub sample: SamplePriorConfig,
    pub gradcheck: GradcheckConfig,
    /// Environment map for `relight`.
    pub env: Option<PathBuf>,
    /// State directory or scene description to evaluate or relight.
    pub estimate: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> RunConfig {
        let (optim, spp, synthetic) = match preset {
            Preset::Desk => (OptimConfig::desk(), 144, SyntheticSpec::checker_sphere()),
            Preset::Paper => (
                OptimConfig::paper(),
                144,
                SyntheticSpec {
                    texture_resolution: 2048,
                    env_resolution: [512, 256],
                    spp: 144,
                    ..SyntheticSpec::checker_sphere()
                },
            ),
        };
        RunConfig {
            preset,
            seed: 0,
            out: None,
            workers: None,
            deterministic: false,
            scene: None,
            scene_preset: None,
            bundle: None,
            observations: None,
            image_size: 128,
            render: RenderConfig { spp, ..Default::default() },
            optim,
            prior: PriorMode::Oracle,
            oracle_noise: 0.1,
            albedo_model: None,
            specular_model: None,
            toy: ToyConfig::default(),
            synthetic,
            sample: SamplePriorConfig::default(),
            gradcheck: GradcheckConfig::default(),
            env: None,
            estimate: None,
        }
    }

    /// Preset defaults overlaid with the JSON file. `preset_flag` wins over the file's preset.
    pub fn load(path: Option<&Path>, preset_flag: Option<Preset>) -> Result<RunConfig, UsageError> {
        let file: Value = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !file.is_object() {
            return Err(UsageError("config must be a JSON object".into()));
        }
        let file_preset = match file.get("preset") {
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone()).map_err(|e| UsageError(format!("invalid preset: {e}")))?,
            ),
            None => None,
        };
        let preset = preset_flag.or(file_preset).unwrap_or_default();
        let mut base = serde_json::to_value(RunConfig::for_preset(preset)).expect("config serializes");
        merge(&mut base, file);
        base["preset"] = serde_json::to_value(preset).expect("preset serializes");
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    /// Copies the run seed into every component that draws random numbers.
    pub fn propagate_seed(&mut self) {
        self.render.seed = self.seed;
        self.optim.seed = self.seed;
        self.toy.seed = self.seed;
        self.synthetic.seed = self.seed;
    }
}

/// Recursive object merge: `patch` keys replace or descend into `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn file_overrides_preset_and_flag_overrides_file_preset() {
        let f = write(r#"{"preset": "paper", "optim": {"stage1_iterations": 7}}"#);
        let c = RunConfig::load(Some(f.path()), None).unwrap();
        assert_eq!(c.preset, Preset::Paper);
        assert_eq!(c.optim.stage1_iterations, 7);
        assert_eq!(c.optim.texture_resolution, 2048);
        let c = RunConfig::load(Some(f.path()), Some(Preset::Desk)).unwrap();
        assert_eq!(c.optim.texture_resolution, 256);
        assert_eq!(c.optim.stage2_iterations, 1500);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let f = write(r#"{"optim": {"stage1_iters": 7}}"#);
        assert!(RunConfig::load(Some(f.path()), None).is_err());
        let f = write(r#"{"sed": 3}"#);
        assert!(RunConfig::load(Some(f.path()), None).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::for_preset(Preset::Desk);
        let text = serde_json::to_string(&c).unwrap();
        let f = write(&text);
        assert_eq!(RunConfig::load(Some(f.path()), None).unwrap(), c);
    }
}
