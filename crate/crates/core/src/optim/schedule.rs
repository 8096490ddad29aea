use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step learning rate: linear warmup to `peak_lr`, then cosine decay to
/// `min_lr` over the remaining steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Pure cosine decay from `lr0` to zero with no warmup.
    pub fn cosine(lr0: f64, total_steps: usize) -> Self {
        Self {
            peak_lr: lr0,
            min_lr: 0.0,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "need 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps;
        if step < w {
            return Ok(self.peak_lr * (step + 1) as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.min_lr
            + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Free-function form of [`ScheduleConfig::lr_at`].
pub fn lr_at(schedule: &ScheduleConfig, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}

/// Learning-rate multiplier `decay^(depth + 1 - group)` for a layer group
/// (0 = embeddings, `b + 1` = block `b`, `depth + 1` = head).
pub fn layer_scale(group: usize, depth: usize, decay: f64) -> Result<f64> {
    if group > depth + 1 {
        return Err(Error::GroupOutOfRange {
            group,
            max: depth + 1,
        });
    }
    Ok(decay.powi((depth + 1 - group) as i32))
}
