//! Per-track Mel spectrogram cache: 16-byte header (8-byte magic, u32 version,
//! u32 reserved), u32 frames, u32 bands, then little-endian f32 row-major.

use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_atomic, ByteReader};
use crate::numerics::Tensor;

pub const MEL_CACHE_MAGIC: &[u8; 8] = b"VQMIRMEL";
pub const MEL_CACHE_VERSION: u32 = 1;

pub fn write_mel_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let (t, m) = (mel.n_frames(), mel.n_mels());
    let mut buf = Vec::with_capacity(24 + 4 * t * m);
    buf.extend_from_slice(MEL_CACHE_MAGIC);
    buf.extend_from_slice(&MEL_CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    for v in mel.frames.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Reads a cache file into a `[T, n_mels]` tensor.
pub fn read_mel_cache(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(8).ok() != Some(&MEL_CACHE_MAGIC[..]) {
        return Err(Error::format(path, "not a mel cache file"));
    }
    let version = r.u32()?;
    if version != MEL_CACHE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MEL_CACHE_VERSION,
        });
    }
    r.u32()?;
    let (t, m) = (r.u32()? as usize, r.u32()? as usize);
    let data = (0..t * m)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(vec![t, m], data)
}
