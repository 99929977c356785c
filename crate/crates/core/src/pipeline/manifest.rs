use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_atomic};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Preprocess,
    TrainVqvae,
    Pretrain,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Preprocess,
        Stage::TrainVqvae,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Preprocess => "preprocess",
            Stage::TrainVqvae => "train-vqvae",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth-data" | "import-fma" | "ingest" => Ok(Stage::Data),
            _ => Stage::ALL
                .into_iter()
                .find(|st| st.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Pending,
    Complete,
    /// The configuration does not use this stage.
    NotNeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub fingerprint: String,
    /// Flattened configuration keys (and upstream fingerprints) the stage depends on.
    pub inputs: BTreeMap<String, String>,
    pub dir: Option<PathBuf>,
    /// Unix seconds; absent for stages reused from an earlier run.
    pub started: Option<u64>,
    pub finished: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub name: String,
    pub config_fingerprint: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.record(stage)
            .is_some_and(|r| r.status == StageStatus::Complete)
    }

    /// Directory of a completed stage.
    pub fn stage_dir(&self, stage: Stage) -> Result<&Path> {
        match self.record(stage) {
            Some(StageRecord {
                status: StageStatus::Complete,
                dir: Some(d),
                ..
            }) => Ok(d),
            _ => Err(Error::MissingArtifact(format!(
                "stage {stage} has not completed for run {}",
                self.name
            ))),
        }
    }

    pub fn report_path(&self) -> Result<PathBuf> {
        Ok(self.stage_dir(Stage::Evaluate)?.join("report.json"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: m.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok(m)
    }
}

/// Keys whose values differ between two input maps (including added/removed).
pub(crate) fn changed_keys(
    old: &BTreeMap<String, String>,
    new: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut keys: Vec<String> = old
        .iter()
        .filter(|(k, v)| new.get(*k) != Some(v))
        .map(|(k, v)| match new.get(k) {
            Some(n) => format!("{k}: {v} -> {n}"),
            None => format!("{k}: {v} -> (removed)"),
        })
        .collect();
    keys.extend(
        new.iter()
            .filter(|(k, _)| !old.contains_key(*k))
            .map(|(k, v)| format!("{k}: (absent) -> {v}")),
    );
    keys
}

/// Flattens a JSON value into `prefix.key` → scalar text.
pub(crate) fn flatten(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
