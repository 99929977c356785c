//! Audio representation laboratory for music genre recognition.
//!
//! Builds Mel spectrograms and deep vector-quantized token/codebook sequences
//! from PCM audio, trains masked-pretrained 4-layer transformer classifiers on
//! each representation, and evaluates them with macro-averaged F1.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod datalab;
pub mod dsp;
pub mod evalkit;
mod io_util;
pub mod models;
pub mod pipeline;
pub mod training;
pub mod vqcodec;
