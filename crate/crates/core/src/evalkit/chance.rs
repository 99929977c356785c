use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::confusion::{macro_f1, ConfusionMatrix};
use crate::error::{Error, Result};

/// Published chance F1 for 16 genres, kept for side-by-side reporting only.
pub const REFERENCE_CHANCE_F1: f64 = 0.11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceBaseline {
    pub k: usize,
    pub trials: usize,
    /// Mean macro-F1 of a uniform random predictor.
    pub mean: f64,
    pub std_err: f64,
    pub reference: f64,
}

/// Monte-Carlo expected macro-F1 of a predictor that picks one of K classes
/// uniformly at random, for fixed ground-truth class counts.
pub fn chance_baseline(counts: &[u64], trials: usize, seed: u64) -> Result<ChanceBaseline> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "chance baseline needs K >= 2, got {k}"
        )));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument(
            "chance baseline needs at least 2 trials".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cm = ConfusionMatrix::zeros(k);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        for (t, &n) in counts.iter().enumerate() {
            cm.counts[t].iter_mut().for_each(|c| *c = 0);
            for _ in 0..n {
                cm.counts[t][rng.gen_range(0..k)] += 1;
            }
        }
        let f = macro_f1(&cm);
        sum += f;
        sum_sq += f * f;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(ChanceBaseline {
        k,
        trials,
        mean,
        std_err: (var / n).sqrt(),
        reference: REFERENCE_CHANCE_F1,
    })
}
