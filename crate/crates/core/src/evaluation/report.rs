//! Decomposition metrics against a ground-truth bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::metrics::{align_mean_rgb, mse, psnr, ssim};
use crate::evaluation::synthetic::{GtBundle, Split, render_config_for};
use crate::gradients::uv_footprint;
use crate::image::{Image, Mask};
use crate::renderer::{RenderBuffers, render, render_raw};
use crate::scene_io::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub albedo_psnr: f64,
    pub albedo_ssim: f64,
    pub aligned_albedo_psnr: f64,
    pub aligned_albedo_ssim: f64,
    pub view_psnr: f64,
    pub relight_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub albedo_psnr: f64,
    pub albedo_ssim: f64,
    pub aligned_albedo_psnr: f64,
    pub aligned_albedo_ssim: f64,
    pub view_psnr: f64,
    pub relight_psnr: f64,
    pub roughness_mse: f64,
    /// Largest relative deviation of the R/G and B/G ratios of mean albedo from ground truth.
    pub channel_ratio_deviation: f64,
    /// Scalar applied to the albedo texture before relighting.
    pub albedo_scale: f64,
    pub alignment: String,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>5} {:>11} {:>11} {:>12} {:>12} {:>10} {:>10}\n",
            "view", "albedo_psnr", "albedo_ssim", "aligned_psnr", "aligned_ssim", "view_psnr", "relight"
        );
        let row = |name: String, m: [f64; 6]| {
            format!(
                "{name:>5} {:>11.3} {:>11.4} {:>12.3} {:>12.4} {:>10.3} {:>10.3}\n",
                m[0], m[1], m[2], m[3], m[4], m[5]
            )
        };
        for v in &self.views {
            s += &row(
                v.view.to_string(),
                [v.albedo_psnr, v.albedo_ssim, v.aligned_albedo_psnr, v.aligned_albedo_ssim, v.view_psnr, v.relight_psnr],
            );
        }
        s += &row(
            "mean".into(),
            [
                self.albedo_psnr,
                self.albedo_ssim,
                self.aligned_albedo_psnr,
                self.aligned_albedo_ssim,
                self.view_psnr,
                self.relight_psnr,
            ],
        );
        s += &format!(
            "roughness_mse {:.5}  channel_ratio_deviation {:.4}  albedo_scale {:.4}  alignment {}\n",
            self.roughness_mse, self.channel_ratio_deviation, self.albedo_scale, self.alignment
        );
        s
    }
}

fn clamp01(img: &Image) -> Image {
    img.map(|v| v.clamp(0.0, 1.0))
}

fn masked_channel_means(imgs: &[(&Image, &Mask)]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for (img, m) in imgs {
        for p in 0..img.pixel_count() {
            if m.data[p] {
                for k in 0..3 {
                    sum[k] += img.data[p * 3 + k] as f64;
                }
            }
        }
    }
    sum
}

/// Largest of |(R/G)_pred / (R/G)_gt − 1| and the same for B/G.
pub fn channel_ratio_deviation(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let r = |c: [f64; 3], k: usize| c[k] / c[1].max(1e-12);
    [0, 2].iter().map(|&k| (r(pred, k) / r(gt, k) - 1.0).abs()).fold(0.0, f64::max)
}

/// Texels of the ground-truth textures seen from any training or held-out camera.
pub fn bundle_footprint(bundle: &GtBundle) -> Result<(Mask, Mask)> {
    let s = &bundle.scene;
    let mut a = Mask::new(s.albedo.width(), s.albedo.height(), false);
    let mut r = Mask::new(s.roughness.width(), s.roughness.height(), false);
    let train = bundle.train_cameras.iter().enumerate().map(|(i, c)| (c, render_config_for(&bundle.spec, Split::Train, i)));
    let test = bundle.test_cameras.iter().enumerate().map(|(i, c)| (c, render_config_for(&bundle.spec, Split::Test, i)));
    for (cam, cfg) in train.chain(test) {
        let (_, tape) = render_raw(s, s, cam, &cfg, true)?;
        uv_footprint(s, &tape.expect("tape was requested"), &mut a, &mut r);
    }
    Ok((a, r))
}

/// Metrics of an estimated scene on the held-out views of `bundle`. Estimates are rendered with
/// the seeds of the ground-truth renders; HDR buffers are clamped to [0, 1] first.
pub fn evaluate_decomposition(estimate: &Scene, bundle: &GtBundle) -> Result<MetricReport> {
    let gt = &bundle.scene;
    if estimate.albedo.image.width != gt.albedo.image.width
        || estimate.albedo.image.height != gt.albedo.image.height
        || estimate.roughness.image.width != gt.roughness.image.width
        || estimate.roughness.image.height != gt.roughness.image.height
    {
        return Err(Error::ShapeMismatch("estimated textures differ in resolution from ground truth".into()));
    }
    if bundle.test.is_empty() {
        return Err(Error::InvalidArgument("bundle has no held-out views".into()));
    }
    let spec = &bundle.spec;
    let est: Vec<RenderBuffers> = bundle
        .test_cameras
        .iter()
        .enumerate()
        .map(|(i, c)| render(estimate, c, &render_config_for(spec, Split::Test, i)))
        .collect::<Result<_>>()?;

    let pairs: Vec<(&Image, &Mask)> = est.iter().zip(&bundle.test).map(|(e, g)| (&e.albedo, &g.mask)).collect();
    let gt_pairs: Vec<(&Image, &Mask)> = bundle.test.iter().map(|g| (&g.albedo, &g.mask)).collect();
    let (pm, gm) = (masked_channel_means(&pairs), masked_channel_means(&gt_pairs));
    let sum_p: f64 = pm.iter().sum();
    let albedo_scale = if sum_p > 0.0 { gm.iter().sum::<f64>() / sum_p } else { 1.0 };
    let mut relit_scene = estimate.with_env(bundle.novel_env.clone());
    relit_scene.albedo.image = relit_scene.albedo.image.map(|v| (v as f64 * albedo_scale) as f32);
    relit_scene.albedo.clamp();

    let mut views = Vec::new();
    for (i, (e, g)) in est.iter().zip(&bundle.test).enumerate() {
        let m = Some(&g.mask);
        let (ea, ga) = (clamp01(&e.albedo), clamp01(&g.albedo));
        let (aligned, _) = align_mean_rgb(&ea, &ga, m)?;
        let aligned = clamp01(&aligned);
        let relit = render(&relit_scene, &bundle.test_cameras[i], &render_config_for(spec, Split::Novel, i))?;
        views.push(ViewMetrics {
            view: i,
            albedo_psnr: psnr(&ea, &ga, m, 1.0)?,
            albedo_ssim: ssim(&ea, &ga, m)?,
            aligned_albedo_psnr: psnr(&aligned, &ga, m, 1.0)?,
            aligned_albedo_ssim: ssim(&aligned, &ga, m)?,
            view_psnr: psnr(&clamp01(&e.rgb), &clamp01(&g.rgb), m, 1.0)?,
            relight_psnr: psnr(&clamp01(&relit.rgb), &clamp01(&bundle.novel[i].rgb), m, 1.0)?,
        });
    }
    let (_, rough_fp) = bundle_footprint(bundle)?;
    let roughness_mse = mse(&estimate.roughness.image, &gt.roughness.image, Some(&rough_fp))?;
    let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / views.len() as f64;
    Ok(MetricReport {
        albedo_psnr: mean(|v| v.albedo_psnr),
        albedo_ssim: mean(|v| v.albedo_ssim),
        aligned_albedo_psnr: mean(|v| v.aligned_albedo_psnr),
        aligned_albedo_ssim: mean(|v| v.aligned_albedo_ssim),
        view_psnr: mean(|v| v.view_psnr),
        relight_psnr: mean(|v| v.relight_psnr),
        views,
        roughness_mse,
        channel_ratio_deviation: channel_ratio_deviation(pm, gm),
        albedo_scale,
        alignment: "mean-rgb".into(),
    })
}
