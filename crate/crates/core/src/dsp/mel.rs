use super::stft::stft;
use super::{AudioClip, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` filters plus the two outer edges.
pub(crate) fn mel_points(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Integral of the unit-peak triangle `(left, centre, right)` from -inf to `x`.
fn triangle_cdf(x: f64, l: f64, c: f64, r: f64) -> f64 {
    if x <= l {
        0.0
    } else if x <= c {
        (x - l) * (x - l) / (2.0 * (c - l))
    } else if x <= r {
        (c - l) / 2.0 + ((r - c) * (r - c) - (r - x) * (r - x)) / (2.0 * (r - c))
    } else {
        (r - l) / 2.0
    }
}

/// Unit-peak triangle `(left, centre, right)` evaluated at `f`.
fn triangle(f: f64, l: f64, c: f64, r: f64) -> f64 {
    if f > l && f <= c {
        (f - l) / (c - l)
    } else if f > c && f < r {
        (r - f) / (r - c)
    } else {
        0.0
    }
}

/// Triangular Mel filterbank `[n_mels, frame/2 + 1]`.
///
/// Filter centres are equally spaced on the Mel scale between 0 Hz and Nyquist
/// and each triangle peaks at 1, sampled at the FFT bin frequencies. A filter
/// narrow enough to fall between two bins is instead averaged over each bin's
/// bandwidth and scaled to peak 1, so no filter is empty.
pub fn mel_filterbank(config: &SpectrogramConfig, sample_rate: u32) -> Result<Tensor> {
    let bins = config.n_bins();
    if config.n_mels == 0 || config.n_mels > bins {
        return Err(Error::InvalidArgument(format!(
            "n_mels {} exceeds {bins} frequency bins",
            config.n_mels
        )));
    }
    let pts = mel_points(config.n_mels, sample_rate);
    let df = sample_rate as f64 / config.frame_size as f64;
    let mut w = vec![0.0; config.n_mels * bins];
    for m in 0..config.n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        let row = &mut w[m * bins..(m + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            *v = triangle(k as f64 * df, l, c, r);
        }
        if row.iter().all(|&v| v == 0.0) {
            for (k, v) in row.iter_mut().enumerate() {
                let f = k as f64 * df;
                *v = (triangle_cdf(f + df / 2.0, l, c, r) - triangle_cdf(f - df / 2.0, l, c, r))
                    / df;
            }
            let peak = row.iter().copied().fold(0.0, f64::max);
            row.iter_mut().for_each(|v| *v /= peak);
        }
    }
    Tensor::new(vec![config.n_mels, bins], w)
}

/// `10 log10(S / max S)` clamped below at `db_floor`; an all-zero input maps to the floor.
pub fn power_to_db(power: &Tensor, db_floor: f64) -> Tensor {
    let max = power.data().iter().copied().fold(0.0, f64::max);
    let data = power
        .data()
        .iter()
        .map(|&p| {
            if max <= 0.0 || p <= 0.0 {
                db_floor
            } else {
                (10.0 * (p / max).log10()).max(db_floor)
            }
        })
        .collect();
    Tensor::new(power.shape().to_vec(), data).expect("same shape")
}

/// Time x Mel-band matrix in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub clip_id: String,
    /// `[T, n_mels]`
    pub frames: Tensor,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn mel_spectrogram(clip: &AudioClip, config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let power = stft(clip, config)?;
    let fb = mel_filterbank(config, clip.sample_rate)?;
    let (frames, bins) = (power.shape()[0], power.shape()[1]);
    let n_mels = config.n_mels;
    let mut mel = vec![0.0; frames * n_mels];
    for t in 0..frames {
        let prow = power.row(t);
        for m in 0..n_mels {
            mel[t * n_mels + m] =
                crate::numerics::kernels::dot(&fb.data()[m * bins..(m + 1) * bins], prow);
        }
    }
    let mel = Tensor::new(vec![frames, n_mels], mel)?;
    Ok(MelSpectrogram {
        clip_id: clip.id.clone(),
        frames: power_to_db(&mel, config.db_floor),
        config: config.clone(),
    })
}
