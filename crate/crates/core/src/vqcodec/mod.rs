//! Single-level VQ-VAE: strided residual conv encoder, nearest-code
//! quantizer with a straight-through gradient, and a mirrored transposed-conv
//! decoder.

mod cache;
mod model;
mod quantize;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use cache::{
    read_codebook, read_token_cache, write_codebook, write_token_cache, CODEBOOK_MAGIC,
    TOKEN_CACHE_MAGIC, VQ_CACHE_VERSION,
};
pub use model::{FrozenQuantizer, VqForward, VqLosses, VqNet, VqVae};
pub use quantize::{codebook_stats, nearest_code, quantize, quantize_with_margins, CodebookStats};
pub use train::{train_vqvae, VqTrainConfig, VqTrainReport};

/// Latents closer than this to a Voronoi boundary are flagged as non-smooth.
pub const VORONOI_BAND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqVaeConfig {
    /// Temporal downsampling factor; one stride-2 stage per factor of two.
    /// 8, 32 and 128 are the supported presets.
    pub compression: usize,
    pub vocab_size: usize,
    pub code_dim: usize,
    /// Conv width of every encoder/decoder stage.
    pub channels: usize,
    pub commitment_beta: f64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig {
            compression: 128,
            vocab_size: 2048,
            code_dim: 64,
            channels: 32,
            commitment_beta: 0.25,
        }
    }
}

impl VqVaeConfig {
    pub fn stages(&self) -> usize {
        self.compression.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.compression.is_power_of_two() || self.compression < 2 {
            return Err(Error::Config(format!(
                "compression must be a power of two >= 2, got {}",
                self.compression
            )));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize {
            return Err(Error::Config(format!(
                "vocab_size must be in [1, {}], got {}",
                u16::MAX,
                self.vocab_size
            )));
        }
        if self.code_dim == 0 || self.channels == 0 {
            return Err(Error::Config(
                "code_dim and channels must be positive".into(),
            ));
        }
        if !(self.commitment_beta >= 0.0) {
            return Err(Error::Config("commitment_beta must be >= 0".into()));
        }
        Ok(())
    }

    /// Token count for a clip of `num_samples`: `ceil(num_samples / compression)`.
    pub fn token_len(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.compression)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub clip_id: String,
    pub compression: usize,
    pub tokens: Vec<u16>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().map(|&t| t as usize)
    }
}

/// `[L, code_dim]` rows gathered from the codebook by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSequence {
    pub vectors: Tensor,
}

impl CodebookSequence {
    /// Gathers `codebook[tokens[i]]` for every position; rows are exact copies.
    pub fn gather(codebook: &Tensor, tokens: &TokenSequence) -> Result<Self> {
        let (v, d) = (codebook.rows(), codebook.cols());
        let mut data = Vec::with_capacity(tokens.len() * d);
        for id in tokens.ids() {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "token {id} outside codebook of {v} rows"
                )));
            }
            data.extend_from_slice(codebook.row(id));
        }
        Ok(CodebookSequence {
            vectors: Tensor::new(vec![tokens.len(), d], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
