//! SGD with momentum and the piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStage {
    pub iterations: u64,
    pub lr: f64,
}

/// Learning rate for optimizer step `iter`. Stages run back to back; past
/// the end of the schedule the last rate is kept.
pub fn lr_at(iter: u64, schedule: &[LrStage]) -> Result<f64> {
    let last = schedule.last().ok_or_else(|| invalid("empty learning-rate schedule"))?;
    let mut end = 0u64;
    for stage in schedule {
        end = end.saturating_add(stage.iterations);
        if iter < end {
            return Ok(stage.lr);
        }
    }
    Ok(last.lr)
}

pub fn validate_schedule(schedule: &[LrStage]) -> Result<()> {
    if schedule.is_empty() {
        return Err(invalid("empty learning-rate schedule"));
    }
    if schedule.iter().any(|s| !s.lr.is_finite() || s.lr <= 0.0) {
        return Err(invalid("learning rates must be positive"));
    }
    Ok(())
}

/// `v <- momentum * v + lr * mult * g; w <- w - v`. Parameters with a zero
/// multiplier are left untouched, velocity included.
pub fn sgd_momentum_step<T: Real>(params: &mut [&mut Param<T>], lr: f64, momentum: f64) {
    let mu = T::from_f64_lossy(momentum);
    for p in params.iter_mut() {
        if p.lr_mult == 0.0 {
            continue;
        }
        let rate = T::from_f64_lossy(lr * p.lr_mult);
        let Param {
            value, grad, velocity, ..
        } = &mut **p;
        for ((w, &g), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
            *v = mu * *v + rate * g;
            *w -= *v;
        }
    }
}
