//! AdamW with decoupled weight decay, per-group multipliers and a
//! warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::params::{MultiplierTable, ParamGroup, ParamStore};
use crate::error::{MdmError, Result};

/// Largest momentum coefficient a multiplier can produce.
pub const MAX_BETA: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Requested warmup; capped at a quarter of the run by [`AdamWHyper::warmup_for`].
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub schedule: LrSchedule,
    pub multipliers: MultiplierTable,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 9e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 1000,
            min_lr: 1e-6,
            schedule: LrSchedule::Cosine,
            multipliers: MultiplierTable::uniform(),
        }
    }
}

/// Hyperparameters after applying one group's multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// `β_eff = 1 - m (1 - β)`, clipped to `[0, MAX_BETA]`.
pub fn scaled_momentum(beta: f64, multiplier: f64) -> f64 {
    (1.0 - multiplier * (1.0 - beta)).clamp(0.0, MAX_BETA)
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr;
        if !ok {
            return Err(MdmError::invalid(format!(
                "AdamW hyperparameters out of range: lr={}, wd={}, β1={}, β2={}, ε={}, min_lr={}",
                self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.min_lr
            )));
        }
        if !self.multipliers.validate() {
            return Err(MdmError::invalid("all multipliers must be finite and > 0"));
        }
        Ok(())
    }

    pub fn for_group(&self, group: ParamGroup) -> GroupHyper {
        let m = self.multipliers.effective(group);
        GroupHyper {
            lr: self.lr * m.lr,
            weight_decay: self.weight_decay * m.wd,
            beta1: scaled_momentum(self.beta1, m.alpha1),
            beta2: scaled_momentum(self.beta2, m.alpha2),
            eps: self.eps * m.eps,
        }
    }

    /// `min(warmup_steps, floor(total / 4))`.
    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.min(total_steps / 4)
    }

    /// Factor on the base lr at 1-based `step` of a `total_steps` run.
    pub fn lr_factor(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup_for(total_steps);
        if step <= warmup {
            return step as f64 / warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = (total_steps - warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                let floor = self.min_lr / self.lr;
                floor + (1.0 - floor) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        AdamWState {
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }
}

/// One AdamW update at 1-based `step`; `lr_factor` scales every group's lr.
///
/// All gradients are checked before any parameter changes.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Array2<f64>],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
    step: usize,
    lr_factor: f64,
) -> Result<()> {
    if step == 0 {
        return Err(MdmError::invalid("AdamW steps are 1-based"));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(MdmError::invalid(
            "gradient/state count does not match parameters",
        ));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if p.value.dim() != g.dim() {
            return Err(MdmError::invalid(format!(
                "gradient shape mismatch for `{}`",
                p.name
            )));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(MdmError::NonFiniteGradient {
                group: format!("{} ({})", p.group, p.name),
            });
        }
    }
    for (i, p) in store.params.iter_mut().enumerate() {
        let h = hyper.for_group(p.group);
        let lr = h.lr * lr_factor;
        let bc1 = 1.0 - h.beta1.powi(step as i32);
        let bc2 = 1.0 - h.beta2.powi(step as i32);
        let decay = 1.0 - lr * h.weight_decay;
        Zip::from(&mut p.value)
            .and(&grads[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|w, &g, m, v| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + h.eps);
            });
    }
    Ok(())
}
