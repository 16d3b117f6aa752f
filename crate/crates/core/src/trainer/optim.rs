use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::losses::GradientBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine reaches `lr_min`; later steps stay there.
    pub total_steps: usize,
    pub clip_norm: f64,
    /// Learnable temperatures are clamped at or above this after each
    /// update.
    pub min_tau: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-5,
            lr_min: 6e-6,
            weight_decay: 1e-4,
            momentum: 0.9,
            warmup_steps: 100,
            total_steps: 1000,
            clip_norm: 1.0,
            min_tau: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr_max, self.lr_min, self.weight_decay, self.momentum, self.clip_norm, self.min_tau]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("optimizer settings must be finite"));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::invalid("need 0 <= lr_min <= lr_max"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("weight_decay must be >= 0 and momentum in [0, 1)"));
        }
        if !(self.min_tau > 0.0) {
            return Err(Error::invalid("min_tau must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::invalid("total_steps must be at least warmup_steps"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine annealing to `lr_min` at
/// `total_steps`.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    let progress = if span == 0 {
        1.0
    } else {
        ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0)
    };
    if step == cfg.warmup_steps && span > 0 {
        return cfg.lr_max;
    }
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// Momentum SGD with decoupled weight decay. Temperatures are exempt from
/// decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub momentum: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            momentum: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, &self.config)
    }

    /// Clips `grads` to `clip_norm`, applies one update to `enc` and
    /// advances the step counter.
    pub fn apply(&mut self, enc: &mut ToyEncoder, grads: &GradientBundle) -> Result<UpdateInfo> {
        let info = self.apply_params(enc.params_mut(), grads)?;
        if !enc.is_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        Ok(info)
    }

    /// Same update over an arbitrary set of named parameters; the clip
    /// norm covers all of `grads`.
    pub fn apply_params(&mut self, params: Vec<(String, &mut [f64])>, grads: &GradientBundle) -> Result<UpdateInfo> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let lr = self.lr();
        let grad_norm = grads.global_norm();
        let scale = if grad_norm > self.config.clip_norm {
            self.config.clip_norm / grad_norm
        } else {
            1.0
        };
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let log_tau_floor = self.config.min_tau.ln();
        for (name, param) in params {
            let is_tau = name.starts_with("log_tau.");
            let decay = if is_tau { 0.0 } else { wd };
            let buf = self.momentum.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            let g = grads.get(&name);
            for (i, p) in param.iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]) * scale;
                buf[i] = mu * buf[i] + gi;
                *p -= lr * (buf[i] + decay * *p);
                if is_tau {
                    *p = p.max(log_tau_floor);
                }
            }
        }
        self.step += 1;
        Ok(UpdateInfo {
            lr,
            grad_norm,
            clipped_norm: grad_norm * scale,
        })
    }
}

/// Picks the dataset that supplies the whole next batch.
pub fn draw_dataset<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    validate_weights(weights)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave `acc` a hair below 1.
    Ok(last)
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}
