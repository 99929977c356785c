//! PCM audio to Mel spectrograms: Hann-windowed STFT, triangular Mel
//! filterbank and max-referenced decibel scaling.

mod cache;
mod mel;
mod stft;
mod wav;

pub use cache::{read_mel_cache, write_mel_cache, MEL_CACHE_MAGIC, MEL_CACHE_VERSION};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, power_to_db, MelSpectrogram};
pub use stft::{frame_count, hann_window, stft};
pub use wav::{decimate, read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample_rate must be positive".into(),
            ));
        }
        Ok(AudioClip {
            id: id.into(),
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub frame_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub window: Window,
    pub db_floor: f64,
    pub center_pad: bool,
}

impl Default for SpectrogramConfig {
    /// 512-sample frames, hop 128 (one frame per 128x token), 86 Mel bands.
    fn default() -> Self {
        SpectrogramConfig {
            frame_size: 512,
            hop_size: 128,
            n_mels: 86,
            window: Window::Hann,
            db_floor: -80.0,
            center_pad: true,
        }
    }
}

impl SpectrogramConfig {
    /// Optional ablation with ~46 ms frames at 44.1 kHz; hop unchanged.
    pub fn long_frame() -> Self {
        SpectrogramConfig {
            frame_size: 2048,
            ..Self::default()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame_size.is_power_of_two() || self.frame_size < 2 {
            return Err(Error::Config(format!(
                "frame_size {} is not a power of two",
                self.frame_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.frame_size {
            return Err(Error::Config(format!(
                "hop_size {} must be in [1, frame_size {}]",
                self.hop_size, self.frame_size
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.n_bins() {
            return Err(Error::Config(format!(
                "n_mels {} must be in [1, {}]",
                self.n_mels,
                self.n_bins()
            )));
        }
        if !(self.db_floor < 0.0) {
            return Err(Error::Config(format!(
                "db_floor {} must be negative",
                self.db_floor
            )));
        }
        Ok(())
    }
}
