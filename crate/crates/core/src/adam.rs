//! Bias-corrected Adam update on flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..Default::default() }
    }

    /// One update at 1-based `step`. Moments are kept in f32, arithmetic in f64.
    pub fn update<G: Copy + Into<f64>>(&self, step: u64, param: &mut [f32], grad: &[G], m: &mut [f32], v: &mut [f32]) {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..param.len() {
            let g: f64 = grad[i].into();
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            param[i] = (param[i] as f64 - step) as f32;
        }
    }
}
