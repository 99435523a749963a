//! Metrics, alignment and synthetic ground-truth scenes.

pub mod metrics;
pub mod report;
pub mod synthetic;

pub use metrics::{PSNR_CAP, align_mean_rgb, mse, psnr, ssim};
pub use report::{MetricReport, ViewMetrics, channel_ratio_deviation, evaluate_decomposition};
pub use synthetic::{
    AlbedoPattern, EnvSpec, GtBundle, Primitive, RoughnessPattern, Split, SyntheticSpec, generate_synthetic_scene,
    orbit_cameras, render_config_for, synthetic_scene,
};
