use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (i, (&t, &p)) in truths.iter().zip(preds).enumerate() {
        if t >= k || p >= k {
            return Err(Error::InvalidArgument(format!(
                "label out of range at position {i}: truth {t}, pred {p}, K = {k}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
            class_names: (0..k).map(|c| c.to_string()).collect(),
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} classes",
                names.len(),
                self.k()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Precision, recall and F1 per class; any 0/0 is defined as 0.
    pub fn per_class(&self) -> Vec<ClassScores> {
        let k = self.k();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let support: u64 = self.counts[c].iter().sum();
                let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
                let ratio = |n: f64, d: u64| if d == 0 { 0.0 } else { n / d as f64 };
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.k()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64
    }
}

/// Unweighted mean of per-class F1 over all K classes, including classes with
/// no support.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let scores = cm.per_class();
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

impl fmt::Display for ConfusionMatrix {
    /// Aligned table; rows are ground truth, columns predictions.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .counts
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(self.class_names.iter().map(String::len))
            .max()
            .unwrap_or(1)
            .max(4);
        let label_w = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(10);
        write!(f, "{:<label_w$}", "truth\\pred")?;
        for name in &self.class_names {
            write!(f, " {name:>width$}")?;
        }
        writeln!(f)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            write!(f, "{name:<label_w$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
