use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Periodic Hann window `w[k] = 0.5 - 0.5 cos(2πk/n)`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "hann window length {n} < 2"
        )));
    }
    Ok((0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect())
}

/// Number of STFT frames for `num_samples` under `config`.
pub fn frame_count(num_samples: usize, config: &SpectrogramConfig) -> usize {
    if config.center_pad {
        num_samples.div_ceil(config.hop_size)
    } else if num_samples >= config.frame_size {
        (num_samples - config.frame_size) / config.hop_size + 1
    } else {
        0
    }
}

/// Reflect an out-of-range index back into `[0, n)`; `None` when the clip is too short.
fn reflect(idx: isize, n: usize) -> Option<usize> {
    let n = n as isize;
    let r = if idx < 0 {
        -idx
    } else if idx >= n {
        2 * (n - 1) - idx
    } else {
        idx
    };
    (0..n).contains(&r).then_some(r as usize)
}

/// Power spectrogram `[T, frame/2 + 1]`.
///
/// With `center_pad`, frame `t` is centred on sample `t * hop` and the edges are
/// reflect-padded, so `T = ceil(samples / hop)`.
pub fn stft(clip: &AudioClip, config: &SpectrogramConfig) -> Result<Tensor> {
    config.validate()?;
    if clip.is_empty() {
        return Err(Error::InvalidArgument(format!("clip {} is empty", clip.id)));
    }
    let n = clip.len();
    let frame = config.frame_size;
    let bins = config.n_bins();
    let frames = frame_count(n, config);
    if frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "clip {} has {n} samples, shorter than one frame",
            clip.id
        )));
    }
    let window = hann_window(frame)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let offset = if config.center_pad {
        (frame / 2) as isize
    } else {
        0
    };
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = (t * config.hop_size) as isize - offset;
        for (k, slot) in buf.iter_mut().enumerate() {
            let s = reflect(start + k as isize, n).map_or(0.0, |i| clip.samples[i]);
            *slot = Complex::new(s * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new(vec![frames, bins], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), Some(1));
        assert_eq!(reflect(-4, 5), Some(4));
        assert_eq!(reflect(5, 5), Some(3));
        assert_eq!(reflect(-6, 5), None);
        assert_eq!(reflect(2, 5), Some(2));
    }

    #[test]
    fn uncentered_frame_count() {
        let cfg = SpectrogramConfig {
            center_pad: false,
            ..Default::default()
        };
        assert_eq!(frame_count(511, &cfg), 0);
        assert_eq!(frame_count(512, &cfg), 1);
        assert_eq!(frame_count(512 + 128, &cfg), 2);
    }
}
