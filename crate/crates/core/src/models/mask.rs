use rand::seq::index::sample;
use rand::Rng;

use super::{MaskConfig, ModelVariant, Sample, SeqInput};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Shortest sequence that masked pretraining accepts.
pub const MIN_PRETRAIN_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Ids(Vec<usize>),
    /// `[L, n_mels]` original normalised frames.
    Frames(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub input: SeqInput,
    pub targets: Targets,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Uniformly placed window (training).
    Random,
    /// Centred window (evaluation), deterministic.
    Center,
}

fn slice_rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let d = t.cols();
    Tensor::new(
        vec![len, d],
        t.data()[start * d..(start + len) * d].to_vec(),
    )
    .expect("in range")
}

/// Contiguous window of at most `max_len` positions.
pub fn crop(s: &Sample, max_len: usize, mode: CropMode, rng: &mut impl Rng) -> Sample {
    let len = s.len();
    if len <= max_len {
        return s.clone();
    }
    let start = match mode {
        CropMode::Random => rng.gen_range(0..=len - max_len),
        CropMode::Center => (len - max_len) / 2,
    };
    match s {
        Sample::Spectro(t) => Sample::Spectro(slice_rows(t, start, max_len)),
        Sample::Token(ids) => Sample::Token(ids[start..start + max_len].to_vec()),
        Sample::Codebook { vectors, tokens } => Sample::Codebook {
            vectors: slice_rows(vectors, start, max_len),
            tokens: tokens[start..start + max_len].to_vec(),
        },
    }
}

/// Number of spans of `span` frames needed to cover `pct` of `len` frames.
pub fn span_count(len: usize, pct: f64, span: usize) -> usize {
    (pct * len as f64 / span as f64).ceil() as usize
}

/// Bernoulli(p) selection per position.
fn select_positions(len: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < p).collect()
}

/// Non-overlapping spans placed uniformly at random (stars and bars).
fn select_spans(len: usize, pct: f64, span: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let n = span_count(len, pct, span);
    if n * span > len {
        return Err(Error::InvalidArgument(format!(
            "{n} spans of {span} frames do not fit in {len} frames"
        )));
    }
    let mut mask = vec![false; len];
    if n == 0 {
        return Ok(mask);
    }
    let free = len - n * span;
    let mut slots = sample(rng, free + n, n).into_vec();
    slots.sort_unstable();
    for (i, c) in slots.into_iter().enumerate() {
        let start = c + i * (span - 1);
        mask[start..start + span].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

/// Hides part of `sample` according to `variant`'s scheme.
///
/// Token: Bernoulli selection with the mask/random/keep split. Codebook: the
/// same selection with selected rows set to zero. Spectro: static-length spans
/// covering `spectro_pct` (drawn from the config set when `None`), zeroed.
pub fn apply_pretrain_mask(
    variant: &ModelVariant,
    s: &Sample,
    rng: &mut impl Rng,
    cfg: &MaskConfig,
    spectro_pct: Option<f64>,
) -> Result<MaskedSample> {
    let len = s.len();
    if len < MIN_PRETRAIN_LEN {
        return Err(Error::InvalidArgument(format!(
            "masked pretraining needs at least {MIN_PRETRAIN_LEN} positions, got {len}"
        )));
    }
    match (variant, s) {
        (ModelVariant::Token { vocab }, Sample::Token(ids)) => {
            let mask = select_positions(len, cfg.token_mask_prob, rng);
            let mut input = ids.clone();
            for (slot, _) in input.iter_mut().zip(&mask).filter(|(_, &m)| m) {
                let u: f64 = rng.gen();
                if u < cfg.token_replace_mask {
                    *slot = *vocab;
                } else if u < cfg.token_replace_mask + cfg.token_replace_random {
                    *slot = rng.gen_range(0..*vocab);
                }
            }
            Ok(MaskedSample {
                input: SeqInput::Tokens(input),
                targets: Targets::Ids(ids.clone()),
                mask,
            })
        }
        (ModelVariant::Codebook { .. }, Sample::Codebook { vectors, tokens }) => {
            let mask = select_positions(len, cfg.token_mask_prob, rng);
            Ok(MaskedSample {
                input: SeqInput::Frames(zero_rows(vectors, &mask)),
                targets: Targets::Ids(tokens.clone()),
                mask,
            })
        }
        (ModelVariant::Spectro { .. }, Sample::Spectro(frames)) => {
            let pct = match spectro_pct {
                Some(p) => p,
                None => cfg.spectro_mask_pcts[rng.gen_range(0..cfg.spectro_mask_pcts.len())],
            };
            if !(0.0..1.0).contains(&pct) {
                return Err(Error::InvalidArgument(format!(
                    "mask percentage {:.1}% must be below 100%",
                    pct * 100.0
                )));
            }
            let mask = select_spans(len, pct, cfg.spectro_span_len, rng)?;
            Ok(MaskedSample {
                input: SeqInput::Frames(zero_rows(frames, &mask)),
                targets: Targets::Frames(frames.clone()),
                mask,
            })
        }
        _ => Err(Error::InvalidArgument(format!(
            "sample does not match the {} variant",
            variant.name()
        ))),
    }
}

fn zero_rows(t: &Tensor, mask: &[bool]) -> Tensor {
    let d = t.cols();
    let mut out = t.clone();
    for (row, _) in out.data_mut().chunks_mut(d).zip(mask).filter(|(_, &m)| m) {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}
