//! Adam and the warmup + reduce-on-plateau learning-rate schedule.

use crate::error::{FctError, Result};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moments and the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(registry: &ParamRegistry) -> Self {
        let zeros = || registry.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update. `grads` is in registry order.
pub fn adam_step(registry: &mut ParamRegistry, grads: &[Tensor<f32>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != registry.len() || state.m.len() != registry.len() {
        return Err(FctError::invalid(format!(
            "adam: {} params, {} grads, {} moment slots",
            registry.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((_, name, p), g) in registry.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(FctError::shape(format!(
                "adam: gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (((p, g), m), v) in registry.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let mn = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
            let vn = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + EPSILON);
            *pi = (*pi as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Improvement smaller than this does not reset the plateau counter.
pub const PLATEAU_MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
}

/// Learning rate for `epoch` given the validation losses of all earlier
/// epochs. Linear warmup from `lr/100` to `lr`; afterwards the rate is
/// multiplied by `plateau_factor` each time `plateau_patience` post-warmup
/// epochs pass without an improvement of at least [`PLATEAU_MIN_DELTA`],
/// never going below `min_lr`.
pub fn lr_schedule(epoch: usize, val_history: &[f64], cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let start = cfg.lr / 100.0;
        return start + (cfg.lr - start) * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut bad = 0;
    let end = epoch.min(val_history.len());
    for &v in val_history.get(cfg.warmup_epochs..end).unwrap_or(&[]) {
        if v < best - PLATEAU_MIN_DELTA {
            best = v;
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                bad = 0;
            }
        }
    }
    lr.max(cfg.min_lr)
}
