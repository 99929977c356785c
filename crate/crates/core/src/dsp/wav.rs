use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads a PCM or float WAV file; multi-channel audio is averaged to mono.
pub fn read_wav(path: &Path, id: impl Into<String>) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(id, samples, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Integer-factor decimation by block averaging.
pub fn decimate(clip: &AudioClip, factor: usize) -> Result<AudioClip> {
    if factor == 0 || clip.sample_rate as usize % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot decimate {} Hz by {factor}",
            clip.sample_rate
        )));
    }
    let samples = clip
        .samples
        .chunks(factor)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    AudioClip::new(clip.id.clone(), samples, clip.sample_rate / factor as u32)
}
