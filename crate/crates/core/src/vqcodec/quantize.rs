use serde::{Deserialize, Serialize};

use super::{CodebookSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest codebook row; ties go to the lowest index.
pub fn nearest_code(z: &[f64], codebook: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..codebook.rows() {
        let d = sq_dist(z, codebook.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dims(latents: &Tensor, codebook: &Tensor) -> Result<()> {
    if latents.shape().len() != 2
        || codebook.shape().len() != 2
        || latents.cols() != codebook.cols()
    {
        return Err(Error::Shape {
            op: "quantize",
            lhs: latents.shape().to_vec(),
            rhs: codebook.shape().to_vec(),
        });
    }
    if codebook.rows() == 0 {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    Ok(())
}

/// Maps each latent row to its nearest code.
pub fn quantize(
    latents: &Tensor,
    codebook: &Tensor,
    clip_id: &str,
    compression: usize,
) -> Result<(TokenSequence, CodebookSequence)> {
    check_dims(latents, codebook)?;
    let tokens = (0..latents.rows())
        .map(|i| nearest_code(latents.row(i), codebook).0 as u16)
        .collect();
    let tokens = TokenSequence {
        clip_id: clip_id.to_string(),
        compression,
        tokens,
    };
    let vectors = CodebookSequence::gather(codebook, &tokens)?;
    Ok((tokens, vectors))
}

/// Nearest codes plus each latent's Euclidean distance to the nearest
/// Voronoi boundary of its cell.
pub fn quantize_with_margins(
    latents: &Tensor,
    codebook: &Tensor,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_dims(latents, codebook)?;
    let mut ids = Vec::with_capacity(latents.rows());
    let mut margins = Vec::with_capacity(latents.rows());
    let mut dists = vec![0.0; codebook.rows()];
    for i in 0..latents.rows() {
        let z = latents.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (c, d) in dists.iter_mut().enumerate() {
            *d = sq_dist(z, codebook.row(c));
            if *d < best_d {
                (best, best_d) = (c, *d);
            }
        }
        let ea = codebook.row(best);
        let mut margin = f64::INFINITY;
        for (c, &d) in dists.iter().enumerate() {
            if c == best {
                continue;
            }
            let gap = sq_dist(ea, codebook.row(c)).sqrt();
            let m = if gap == 0.0 {
                0.0
            } else {
                (d - best_d) / (2.0 * gap)
            };
            margin = margin.min(m);
        }
        ids.push(best);
        margins.push(margin);
    }
    Ok((ids, margins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    /// Fraction of the vocabulary used at least once.
    pub utilization: f64,
    /// `exp(H)` of the empirical code distribution, in nats.
    pub perplexity: f64,
    pub counts: Vec<u64>,
}

/// Usage diagnostics over a batch of token sequences.
pub fn codebook_stats(batch: &[TokenSequence], vocab_size: usize) -> Result<CodebookStats> {
    let mut counts = vec![0u64; vocab_size];
    for seq in batch {
        for id in seq.ids() {
            *counts.get_mut(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token {id} outside vocabulary of {vocab_size}"))
            })? += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "codebook_stats needs at least one token".into(),
        ));
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        utilization: used as f64 / vocab_size as f64,
        perplexity: entropy.exp(),
        counts,
    })
}
