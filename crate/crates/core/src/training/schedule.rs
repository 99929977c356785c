use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    WarmupLinearDecay,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub mode: ScheduleMode,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub finetune_lr: f64,
}

impl LrSchedule {
    pub const DEFAULT_FINETUNE_LR: f64 = 2e-5;

    /// Warmup over the first 10% of `total_steps`, then linear decay.
    pub fn pretrain(peak_lr: f64, total_steps: u64) -> Self {
        LrSchedule {
            mode: ScheduleMode::WarmupLinearDecay,
            peak_lr,
            warmup_steps: total_steps / 10,
            total_steps,
            finetune_lr: Self::DEFAULT_FINETUNE_LR,
        }
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            mode: ScheduleMode::Constant,
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
            finetune_lr: lr,
        }
    }

    /// Warmup mode: linear 0 → peak over `warmup_steps`, linear decay to 0 at
    /// `total_steps`, and 0 beyond it. Constant mode: `finetune_lr`.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.finetune_lr,
            ScheduleMode::WarmupLinearDecay => {
                if step >= self.total_steps {
                    return 0.0;
                }
                if step < self.warmup_steps {
                    return self.peak_lr * step as f64 / self.warmup_steps as f64;
                }
                let decay = (self.total_steps - self.warmup_steps) as f64;
                self.peak_lr * (self.total_steps - step) as f64 / decay
            }
        }
    }
}
