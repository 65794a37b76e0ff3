use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then a quarter-period sine anneal to
/// `final_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-4,
            final_lr: 5e-5,
            warmup_steps: 10_000,
            total_steps: 500_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup of {} steps exceeds the {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr <= self.base_lr) || !(self.final_lr >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= final lr <= base lr, got {} and {}",
                self.final_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past the end stay at `final_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * (step as f64 / self.warmup_steps as f64);
        }
        if step >= self.total_steps {
            return self.final_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.base_lr + (self.final_lr - self.base_lr) * (std::f64::consts::FRAC_PI_2 * progress).sin()
    }
}

/// Free-function form of [`Schedule::lr_at`].
pub fn lr_at(step: u64, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}
