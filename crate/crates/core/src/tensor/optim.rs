//! AdamW with a linear-warmup / cosine-decay learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay reaching exactly 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_frac: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || !(0.0..1.0).contains(&warmup_frac) || !(base_lr >= 0.0) {
            return Err(Error::Config(format!(
                "bad schedule: lr {base_lr}, warmup {warmup_frac}, steps {total_steps}"
            )));
        }
        let warmup_steps = (warmup_frac * total_steps as f64).round() as u64;
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Moment buffers for every parameter that was trainable when the state
/// was created, plus the step counter and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig, schedule: CosineSchedule) -> Self {
        let moments = store
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(id, _, t)| {
                (
                    id,
                    Moments {
                        first: vec![0.0; t.numel()],
                        second: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        Self {
            config,
            schedule,
            step: 0,
            moments,
        }
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr_at(self.step + 1)
    }
}

/// One decoupled-weight-decay Adam update over every tracked, trainable
/// parameter. Missing gradients count as zero. Returns the learning rate used.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<f64> {
    state.step += 1;
    let t = state.step as i32;
    let lr = state.schedule.lr_at(state.step);
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (&id, mom) in state.moments.iter_mut() {
        let p = store.get_mut(id);
        if !p.requires_grad() {
            continue;
        }
        if mom.first.len() != p.numel() {
            return Err(Error::Contract(format!(
                "moment buffer of length {} for parameter with {} values",
                mom.first.len(),
                p.numel()
            )));
        }
        let grad = p.grad().map(<[f64]>::to_vec);
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            mom.first[i] = beta1 * mom.first[i] + (1.0 - beta1) * g;
            mom.second[i] = beta2 * mom.second[i] + (1.0 - beta2) * g * g;
            let m_hat = mom.first[i] / bc1;
            let v_hat = mom.second[i] / bc2;
            data[i] -= lr * weight_decay * data[i];
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(lr)
}
