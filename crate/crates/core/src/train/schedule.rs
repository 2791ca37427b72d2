use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: u64, max_lr: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            warmup_steps,
            max_lr,
            min_lr: 0.0,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Like [`ScheduleConfig::new`], but shortens the warmup to
    /// `total_steps - 1` when the run is too short to hold it.
    pub fn clamped(warmup_steps: u64, max_lr: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Self::new(warmup_steps.min(total_steps - 1), max_lr, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} steps)",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::Config("learning rates must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return Ok(self.max_lr);
            }
            return Ok(self.max_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr + (self.max_lr - self.min_lr) * cos)
    }
}
