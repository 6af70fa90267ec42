//! AdamW with per-family learning rates and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{ModelParameters, ParamFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Rate for the query/key biases (which hold the bias coefficients) and
    /// the lane frequencies.
    #[serde(default = "default_elevated")]
    pub elevated_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    /// Applied to every family except the lane frequencies.
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_elevated() -> f64 {
    1e-2
}
fn default_warmup() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    5e-2
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl OptimConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            elevated_lr: default_elevated(),
            warmup_ratio: default_warmup(),
            weight_decay: default_decay(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: default_clip(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return invalid(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            ));
        }
        if self.lr < 0.0 || self.elevated_lr < 0.0 || self.weight_decay < 0.0 {
            return invalid("learning rates and weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return invalid("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn family_lr(&self, family: ParamFamily) -> f64 {
        match family {
            ParamFamily::QkBias | ParamFamily::LaneFrequency => self.elevated_lr,
            ParamFamily::Weight | ParamFamily::Norm => self.lr,
        }
    }
}

/// Multiplier in `[0, 1]` at `step` of `total`: linear warmup, then cosine decay to 0.
pub fn schedule(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

pub struct AdamW {
    config: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ModelParameters) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params
            .to_arrays()
            .into_iter()
            .map(|a| vec![0.0; a.len()])
            .collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// One update with the schedule multiplier `scale` applied to every rate.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, scale: f64) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let g_arrays = grads.to_arrays();
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(|_, family, p| {
            let lr = c.family_lr(family) * scale;
            let decay = if family == ParamFamily::LaneFrequency {
                0.0
            } else {
                c.weight_decay
            };
            let (mi, vi, g) = (&mut m[idx], &mut v[idx], &g_arrays[idx]);
            for j in 0..p.len() {
                mi[j] = b1 * mi[j] + (1.0 - b1) * g[j];
                vi[j] = b2 * vi[j] + (1.0 - b2) * g[j] * g[j];
                let update = (mi[j] / bc1) / ((vi[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + decay * p[j]);
            }
            idx += 1;
        });
    }
}
