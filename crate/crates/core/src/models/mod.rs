//! Shared 4-layer transformer encoder with Spectro / Token / Codebook
//! front-ends, masked-pretraining objectives and a mean-pooled genre head.

mod mask;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use mask::{apply_pretrain_mask, crop, span_count, CropMode, MaskedSample, Targets};
pub use transformer::{Encoded, Transformer, TransformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Std of the normal initialisation of every weight matrix and embedding.
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 512,
            dropout: 0.1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    /// BERT-base width at the fixed depth of four layers, for runs with the compute.
    pub fn full_size() -> Self {
        TransformerConfig {
            d_model: 768,
            n_heads: 12,
            max_seq_len: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "transformer dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Which representation the model reads; fixes front-end, masking and
/// pretraining loss together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelVariant {
    /// Normalised Mel frames, `n_mels` wide; Huber reconstruction of masked frames.
    Spectro { n_mels: usize },
    /// VQ token ids; ids `vocab` and `vocab + 1` are `[MASK]` and `[PAD]`.
    Token { vocab: usize },
    /// Codebook vectors `code_dim` wide; masked rows are zeroed and the
    /// objective predicts the original token ids.
    Codebook { code_dim: usize, vocab: usize },
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Spectro { .. } => "spectro",
            ModelVariant::Token { .. } => "token",
            ModelVariant::Codebook { .. } => "codebook",
        }
    }

    pub fn mask_id(&self) -> Option<usize> {
        match *self {
            ModelVariant::Token { vocab } => Some(vocab),
            _ => None,
        }
    }

    pub fn pad_id(&self) -> Option<usize> {
        match *self {
            ModelVariant::Token { vocab } => Some(vocab + 1),
            _ => None,
        }
    }

    /// Output width of the pretraining head.
    pub fn pretrain_width(&self) -> usize {
        match *self {
            ModelVariant::Spectro { n_mels } => n_mels,
            ModelVariant::Token { vocab } | ModelVariant::Codebook { vocab, .. } => vocab,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub token_mask_prob: f64,
    /// Of the selected positions: fraction replaced by `[MASK]`, fraction by a
    /// random id; the rest keep their id.
    pub token_replace_mask: f64,
    pub token_replace_random: f64,
    pub spectro_span_len: usize,
    /// One percentage is drawn per batch. Placeholder set; the source names no values.
    pub spectro_mask_pcts: Vec<f64>,
    pub huber_delta: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            token_mask_prob: 0.30,
            token_replace_mask: 0.8,
            token_replace_random: 0.1,
            spectro_span_len: 8,
            spectro_mask_pcts: vec![0.15, 0.30, 0.45],
            huber_delta: 1.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.token_mask_prob) {
            return Err(Error::Config(format!(
                "token_mask_prob {} outside [0, 1)",
                self.token_mask_prob
            )));
        }
        if self.token_replace_mask < 0.0
            || self.token_replace_random < 0.0
            || self.token_replace_mask + self.token_replace_random > 1.0
        {
            return Err(Error::Config(
                "token replacement split must sum to at most 1".into(),
            ));
        }
        if self.spectro_span_len == 0 || self.spectro_mask_pcts.is_empty() {
            return Err(Error::Config(
                "spectro masking needs a span length and percentages".into(),
            ));
        }
        if let Some(p) = self
            .spectro_mask_pcts
            .iter()
            .find(|p| !(0.0..1.0).contains(*p))
        {
            return Err(Error::Config(format!("mask percentage {p} outside [0, 1)")));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        Ok(())
    }
}

/// One unmasked example of a variant's representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    /// Normalised Mel frames `[T, n_mels]`.
    Spectro(Tensor),
    Token(Vec<usize>),
    /// Codebook rows `[L, code_dim]` and the token ids they were gathered from.
    Codebook {
        vectors: Tensor,
        tokens: Vec<usize>,
    },
}

impl Sample {
    pub fn len(&self) -> usize {
        match self {
            Sample::Spectro(t) => t.rows(),
            Sample::Token(ids) => ids.len(),
            Sample::Codebook { tokens, .. } => tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model input without any masking.
    pub fn input(&self) -> SeqInput {
        match self {
            Sample::Spectro(t) | Sample::Codebook { vectors: t, .. } => SeqInput::Frames(t.clone()),
            Sample::Token(ids) => SeqInput::Tokens(ids.clone()),
        }
    }
}

/// What the front-end consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum SeqInput {
    /// `[L, width]` real-valued rows.
    Frames(Tensor),
    Tokens(Vec<usize>),
}

impl SeqInput {
    pub fn len(&self) -> usize {
        match self {
            SeqInput::Frames(t) => t.rows(),
            SeqInput::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps dB values in `[db_floor, 0]` onto `[-1, 1]`: `(x - floor/2) / (-floor/2)`.
pub fn normalize_db(frames: &Tensor, db_floor: f64) -> Tensor {
    let half = db_floor / 2.0;
    let data = frames.data().iter().map(|x| (x - half) / -half).collect();
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}
