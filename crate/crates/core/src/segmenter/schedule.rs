use serde::{Deserialize, Serialize};

/// Linear warmup from `lr_floor` to `lr_max`, then polynomial decay to zero
/// over the remaining iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_floor: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub poly_power: f64,
}

pub fn lr_schedule(t: usize, cfg: &ScheduleConfig) -> f64 {
    let t = t.min(cfg.total_iters);
    if t < cfg.warmup_iters {
        let frac = t as f64 / cfg.warmup_iters as f64;
        return cfg.lr_floor + (cfg.lr_max - cfg.lr_floor) * frac;
    }
    let span = (cfg.total_iters - cfg.warmup_iters) as f64;
    let progress = (t - cfg.warmup_iters) as f64 / span;
    cfg.lr_max * (1.0 - progress).max(0.0).powf(cfg.poly_power)
}
