//! SGD with momentum, optional LARS trust-ratio scaling, and the
//! warmup-then-cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{ParamKind, ParamStore};
use crate::error::{CoreError, Result};

/// Linear batch-size scaling of the base learning rate.
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

/// Learning rate at iteration `t` of `total`: linear warmup from 0 to `base`
/// over `warmup` iterations, then a cosine decay reaching 0 at `total`.
pub fn lr_schedule(t: u64, total: u64, warmup: u64, base: f64) -> Result<f64> {
    if total == 0 || warmup >= total {
        return Err(CoreError::Config(alloc::format!(
            "warmup {warmup} must be smaller than total {total}"
        )));
    }
    let t = t.min(total);
    if t < warmup {
        Ok(base * t as f64 / warmup as f64)
    } else {
        let progress = (t - warmup) as f64 / (total - warmup) as f64;
        Ok(base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
    }
}

/// Optimizer hyperparameters for one step.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub use_lars: bool,
    pub lars_eta: f64,
    pub lars_eps: f64,
}

impl OptimConfig {
    pub fn desk_default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
            use_lars: true,
            lars_eta: 0.02,
            lars_eps: 1e-9,
        }
    }
}

/// Momentum buffers, one per parameter entry (empty for running stats).
pub struct OptimState {
    pub velocities: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            velocities: store
                .entries()
                .iter()
                .map(|e| {
                    if e.kind == ParamKind::RunningStat {
                        Vec::new()
                    } else {
                        vec![0.0; e.data.len()]
                    }
                })
                .collect(),
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Apply one optimizer step. `grads[i]` holds the gradient for parameter
/// entry `i`; entries with `None` (and all running statistics) are skipped.
/// Weight decay and LARS adaptation apply to `Weight` entries only; gains
/// and biases take a plain momentum-SGD step.
pub fn step(
    store: &mut ParamStore,
    state: &mut OptimState,
    grads: &[Option<Vec<f64>>],
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != store.entries().len() {
        return Err(CoreError::Internal(alloc::format!(
            "gradient table has {} entries, store has {}",
            grads.len(),
            store.entries().len()
        )));
    }
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        if entry.kind == ParamKind::RunningStat {
            continue;
        }
        let Some(grad) = &grads[i] else { continue };
        if grad.len() != entry.data.len() {
            return Err(CoreError::Internal(alloc::format!(
                "gradient length {} for {} (expected {})",
                grad.len(),
                entry.name,
                entry.data.len()
            )));
        }
        let decayed = entry.kind == ParamKind::Weight;
        let wd = if decayed { cfg.weight_decay } else { 0.0 };
        let trust = if cfg.use_lars && decayed {
            let wn = l2(&entry.data);
            let gn = l2(&grad
                .iter()
                .zip(&entry.data)
                .map(|(g, w)| g + wd * w)
                .collect::<Vec<_>>());
            if wn == 0.0 || gn == 0.0 {
                1.0
            } else {
                cfg.lars_eta * wn / (gn + cfg.lars_eps)
            }
        } else {
            1.0
        };
        let vel = &mut state.velocities[i];
        for ((w, &g), v) in entry.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
            let g = (g + wd * *w) * trust;
            *v = cfg.momentum * *v + g;
            *w -= cfg.lr * *v;
        }
    }
    Ok(())
}
