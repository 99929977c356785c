//! Classification metrics: confusion matrices, per-class and macro-averaged
//! F1, a Monte-Carlo chance baseline and serialized experiment reports.

mod chance;
mod confusion;
mod report;

pub use chance::{chance_baseline, ChanceBaseline, REFERENCE_CHANCE_F1};
pub use confusion::{confusion_matrix, macro_f1, ClassScores, ConfusionMatrix};
pub use report::{
    fingerprint, metrics_report, read_report, write_report, EpochRecord, MetricsReport,
    ReportInputs, REPORT_SCHEMA_VERSION,
};
