use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-frequency class weights with mean 1 over the present classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; k],
        }
    }
}

/// `w_c = (N/K) / count_c`, rescaled to mean 1. Classes with no examples are
/// excluded from N, K and the mean, and get weight 0.
pub fn compute_class_weights(counts: &[usize]) -> Result<ClassWeights> {
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(
            "class weights need at least one non-empty class".into(),
        ));
    }
    for (c, _) in counts.iter().enumerate().filter(|(_, &n)| n == 0) {
        log::warn!("class {c} has no training examples; excluded from class weighting");
    }
    let n: usize = present.iter().sum();
    let k = present.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (n as f64 / k) / c as f64
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / k;
    Ok(ClassWeights {
        weights: raw.iter().map(|w| w / mean).collect(),
    })
}
