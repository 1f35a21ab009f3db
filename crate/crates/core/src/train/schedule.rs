use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Cosine annealing from `base` at `t = 0` to `min` at `t = total`; held at
/// `min` afterwards.
pub fn lr_at(t: u64, base: f64, min: f64, total: u64) -> f64 {
    if total == 0 || t >= total {
        return min;
    }
    min + 0.5 * (base - min) * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// Two learning-rate groups sharing one cosine shape, stepped once per
/// optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn backbone(&self, t: u64) -> f64 {
        lr_at(t, self.backbone_lr, self.min_lr, self.total_steps)
    }

    pub fn head(&self, t: u64) -> f64 {
        lr_at(t, self.head_lr, self.min_lr, self.total_steps)
    }
}
