//! Warmup, stable, decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::train::config::TrainConfig;

/// Linear ramp from 0 to `peak_lr` over `warmup_steps`, constant until
/// `(1 − decay_ratio)·total_steps`, then linear to 0 at `total_steps`.
///
/// Where warmup overlaps the decay window the smaller of the two wins, so
/// the curve stays continuous.
pub fn wsd_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let s = step as f64;
    let ramp = if cfg.warmup_steps == 0 {
        1.0
    } else {
        s / cfg.warmup_steps as f64
    };
    let decay_start = (1.0 - cfg.decay_ratio) * total as f64;
    let tail = (total as f64 - s) / (total as f64 - decay_start);
    Ok(cfg.peak_lr * ramp.min(1.0).min(tail))
}
