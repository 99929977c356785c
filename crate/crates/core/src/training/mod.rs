//! Masked pretraining and class-weighted finetuning loops, learning-rate
//! schedules, class weights and resumable checkpoints.

mod checkpoint;
mod loops;
mod schedule;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loops::{
    evaluate, pretrain_eval_loss, run_finetune, run_pretraining, Evaluation, Example,
    FinetuneConfig, FinetuneOutcome, PretrainConfig, PretrainOutcome, FINETUNE_BATCH_GRID,
    FINETUNE_LR_GRID,
};
pub use schedule::{LrSchedule, ScheduleMode};
pub use weights::{compute_class_weights, ClassWeights};

use serde::{Deserialize, Serialize};

use crate::numerics::{Adam, ParamStore};

/// One line of the JSONL training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// "train" or "validation".
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub macro_f1: f64,
}

/// Everything needed to continue a loop exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_batches: usize,
    #[serde(skip)]
    pub adam: Option<Adam>,
    pub history: Vec<HistoryRecord>,
    pub best: Option<BestRecord>,
    /// Weights at the best validation epoch (finetuning).
    #[serde(skip)]
    pub best_params: Option<ParamStore>,
    /// Epochs without a new best, for early stopping.
    pub stale_epochs: usize,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            seed,
            step: 0,
            epoch: 0,
            batch: 0,
            epoch_loss_sum: 0.0,
            epoch_batches: 0,
            adam: None,
            history: Vec::new(),
            best: None,
            best_params: None,
            stale_epochs: 0,
        }
    }

    /// Values of `metric` on `split`, one per recorded epoch.
    pub fn curve(&self, split: &str, metric: &str) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_jsonl(&self) -> crate::Result<String> {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    fn record(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.history.push(HistoryRecord {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }
}
