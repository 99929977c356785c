//! Experiment orchestration: a TOML-configured, fingerprint-cached stage
//! pipeline (data → preprocess → train-vqvae → pretrain → finetune →
//! evaluate) and the six-configuration comparison.
//!
//! Stage outputs live in `out/stages/<stage>-<fingerprint>/` and are never
//! modified once complete; each run keeps `out/runs/<name>/manifest.json`.

mod compare;
mod config;
mod features;
mod manifest;
mod run;
mod verify;

pub use compare::{compare_reports, run_grid, ComparisonRow, ComparisonTable};
pub use config::{DataConfig, DataSource, ExperimentConfig, VariantKind};
pub use features::{load_examples, DataContext};
pub use manifest::{RunManifest, Stage, StageRecord, StageStatus, MANIFEST_SCHEMA_VERSION};
pub use run::{run_pipeline, RunOptions};
pub use verify::{self_checks, SelfCheck, VerifyReport};
