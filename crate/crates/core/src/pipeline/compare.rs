use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::Stage;
use super::run::{run_pipeline, RunOptions};
use crate::error::{Error, Result};
use crate::evalkit::{read_report, MetricsReport, REFERENCE_CHANCE_F1};
use crate::io_util::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub macro_f1: f64,
    pub test_macro_f1: Option<f64>,
    pub best_epoch: usize,
    pub overfit_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Monte-Carlo chance macro-F1 for the shared validation label counts.
    pub chance_mean: f64,
    pub chance_std_err: f64,
    pub reference_chance: f64,
    /// (representation, pretrained minus scratch macro-F1) for each pair present.
    pub pretraining_deltas: Vec<(String, f64)>,
    pub dataset_fingerprint: String,
    pub split_fingerprint: String,
}

impl ComparisonTable {
    pub fn row(&self, run: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.run == run)
    }
}

/// Tabulates reports that share a dataset and split. Reports built on
/// different data are refused.
pub fn compare_reports(reports: &[(String, MetricsReport)]) -> Result<ComparisonTable> {
    let (first_name, first) = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to compare".into()))?;
    for (name, r) in &reports[1..] {
        for (what, a, b) in [
            (
                "dataset",
                &first.dataset_fingerprint,
                &r.dataset_fingerprint,
            ),
            ("split", &first.split_fingerprint, &r.split_fingerprint),
        ] {
            if a != b {
                return Err(Error::Verification(format!(
                    "runs {first_name} and {name} use different {what} fingerprints ({} vs {}); results are not comparable",
                    &a[..a.len().min(16)],
                    &b[..b.len().min(16)]
                )));
            }
        }
    }
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            run: name.clone(),
            macro_f1: r.macro_f1,
            test_macro_f1: r.test_macro_f1,
            best_epoch: r.best_epoch,
            overfit_gap: r.overfit_gap,
        })
        .collect();
    let mut pretraining_deltas = Vec::new();
    for row in &rows {
        if let Some(rep) = row.run.strip_suffix("-pretrained") {
            if let Some(s) = rows.iter().find(|r| r.run == format!("{rep}-scratch")) {
                pretraining_deltas.push((rep.to_string(), row.macro_f1 - s.macro_f1));
            }
        }
    }
    Ok(ComparisonTable {
        rows,
        chance_mean: first.chance.mean,
        chance_std_err: first.chance.std_err,
        reference_chance: REFERENCE_CHANCE_F1,
        pretraining_deltas,
        dataset_fingerprint: first.dataset_fingerprint.clone(),
        split_fingerprint: first.split_fingerprint.clone(),
    })
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .rows
            .iter()
            .map(|r| r.run.len())
            .max()
            .unwrap_or(0)
            .max(20);
        writeln!(
            f,
            "{:<w$}  {:>8}  {:>8}  {:>5}  {:>8}",
            "run", "val_f1", "test_f1", "best", "gap"
        )?;
        for r in &self.rows {
            let test = r
                .test_macro_f1
                .map_or("-".to_string(), |t| format!("{t:.4}"));
            writeln!(
                f,
                "{:<w$}  {:>8.4}  {:>8}  {:>5}  {:>8.4}",
                r.run, r.macro_f1, test, r.best_epoch, r.overfit_gap
            )?;
        }
        writeln!(
            f,
            "{:<w$}  {:>8.4}  (+/- {:.4}; reference {:.2})",
            "chance", self.chance_mean, self.chance_std_err, self.reference_chance
        )?;
        for (rep, d) in &self.pretraining_deltas {
            writeln!(f, "pretraining effect on {rep}: {d:+.4}")?;
        }
        Ok(())
    }
}

/// Runs every grid configuration (sharing cached stages) and writes
/// `comparison.json` and `comparison.txt` under the output directory.
pub fn run_grid(base: &ExperimentConfig, opts: &RunOptions) -> Result<ComparisonTable> {
    let mut reports = Vec::new();
    for cfg in base.grid() {
        let manifest = run_pipeline(&cfg, opts)?;
        let path = manifest.stage_dir(Stage::Evaluate)?.join("report.json");
        reports.push((cfg.name.clone(), read_report(&path)?));
    }
    let table = compare_reports(&reports)?;
    let mut json = serde_json::to_vec_pretty(&table)?;
    json.push(b'\n');
    write_atomic(&base.out_dir.join("comparison.json"), &json)?;
    write_atomic(
        &base.out_dir.join("comparison.txt"),
        table.to_string().as_bytes(),
    )?;
    Ok(table)
}
