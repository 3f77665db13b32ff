//! Learning-rate schedule: linear warmup, then step decay counted from
//! iteration 0.

use crate::config::TrainConfig;

/// Learning rate for the 0-based iteration `iter`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.lr_peak * ((iter + 1) as f64 / cfg.warmup_iters as f64)
    } else {
        let k = (iter / cfg.decay_every) as i32;
        cfg.lr_peak * cfg.decay_factor.powi(k)
    }
}
