use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::chance::ChanceBaseline;
use super::confusion::{macro_f1, ClassScores, ConfusionMatrix};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One finetuning epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub run: String,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub pretrain_history: Vec<(f64, f64)>,
    pub chance: ChanceBaseline,
    /// Macro-F1 of the selected weights on the test segment, when it is non-empty.
    pub test_macro_f1: Option<f64>,
    /// Validation loss minus train loss at the best epoch; positive means the
    /// model fits the training data better than held-out data.
    pub overfit_gap: f64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub split_fingerprint: String,
}

pub struct ReportInputs<'a> {
    pub run: &'a str,
    pub confusion: ConfusionMatrix,
    pub history: &'a [EpochRecord],
    pub best_epoch: usize,
    /// (train, validation) pretrain loss per epoch; empty when not pretrained.
    pub pretrain_history: &'a [(f64, f64)],
    pub chance: ChanceBaseline,
    pub test_macro_f1: Option<f64>,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub split_fingerprint: String,
}

pub fn metrics_report(inputs: ReportInputs<'_>) -> Result<MetricsReport> {
    let best = inputs
        .history
        .iter()
        .find(|r| r.epoch == inputs.best_epoch)
        .ok_or_else(|| {
            if inputs.history.is_empty() {
                Error::MissingArtifact("finetune history is empty".into())
            } else {
                Error::InvalidArgument(format!("best epoch {} not in history", inputs.best_epoch))
            }
        })?;
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run: inputs.run.to_string(),
        per_class: inputs.confusion.per_class(),
        macro_f1: macro_f1(&inputs.confusion),
        overfit_gap: best.val_loss - best.train_loss,
        confusion: inputs.confusion,
        best_epoch: inputs.best_epoch,
        history: inputs.history.to_vec(),
        pretrain_history: inputs.pretrain_history.to_vec(),
        chance: inputs.chance,
        test_macro_f1: inputs.test_macro_f1,
        config_fingerprint: inputs.config_fingerprint,
        dataset_fingerprint: inputs.dataset_fingerprint,
        split_fingerprint: inputs.split_fingerprint,
    })
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    crate::io_util::write_atomic(path, &bytes)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let bytes = crate::io_util::read_bytes(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != REPORT_SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))
}
