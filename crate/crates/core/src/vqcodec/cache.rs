//! Token caches, codebook dumps and codec checkpoints.
//!
//! Token cache: 8-byte magic, u32 version, u32 compression, u32 vocab, u32 L,
//! then L little-endian u16 ids. Codebook: 8-byte magic, u32 version, u32
//! vocab, u32 code_dim, then vocab×code_dim little-endian f32 row-major.

use std::path::Path;

use super::{TokenSequence, VqNet, VqVae, VqVaeConfig};
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_atomic, ByteReader};
use crate::numerics::serial::{read_param_table, write_param_table};
use crate::numerics::{Precision, Tensor};

pub const TOKEN_CACHE_MAGIC: &[u8; 8] = b"VQMIRTOK";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"VQMIRCBK";
const MODEL_MAGIC: &[u8; 8] = b"VQMIRVQV";
pub const VQ_CACHE_VERSION: u32 = 1;

fn header<'a>(r: &mut ByteReader<'a>, path: &Path, magic: &[u8; 8], what: &str) -> Result<()> {
    if r.take(8).ok() != Some(&magic[..]) {
        return Err(Error::format(path, format!("not a {what} file")));
    }
    let version = r.u32()?;
    if version != VQ_CACHE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VQ_CACHE_VERSION,
        });
    }
    Ok(())
}

pub fn write_token_cache(path: &Path, seq: &TokenSequence, vocab_size: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 2 * seq.len());
    buf.extend_from_slice(TOKEN_CACHE_MAGIC);
    for word in [
        VQ_CACHE_VERSION,
        seq.compression as u32,
        vocab_size as u32,
        seq.len() as u32,
    ] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for t in &seq.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Returns the sequence (clip id taken from the file stem) and the vocabulary size.
pub fn read_token_cache(path: &Path) -> Result<(TokenSequence, usize)> {
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    header(&mut r, path, TOKEN_CACHE_MAGIC, "token cache")?;
    let compression = r.u32()? as usize;
    let vocab = r.u32()? as usize;
    let len = r.u32()? as usize;
    let tokens = (0..len).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::format(
            path,
            format!("token {bad} outside vocabulary {vocab}"),
        ));
    }
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((
        TokenSequence {
            clip_id,
            compression,
            tokens,
        },
        vocab,
    ))
}

pub fn write_codebook(path: &Path, codebook: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * codebook.len());
    buf.extend_from_slice(CODEBOOK_MAGIC);
    for word in [
        VQ_CACHE_VERSION,
        codebook.rows() as u32,
        codebook.cols() as u32,
    ] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for v in codebook.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_codebook(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    header(&mut r, path, CODEBOOK_MAGIC, "codebook")?;
    let (v, d) = (r.u32()? as usize, r.u32()? as usize);
    let data = (0..v * d)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(vec![v, d], data)
}

impl VqVae {
    /// Checkpoint: magic, version, JSON config, named parameter table, usage counters.
    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&VQ_CACHE_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.net.config)?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        write_param_table(&mut buf, &self.params, precision);
        buf.extend_from_slice(&(self.usage_counts.len() as u32).to_le_bytes());
        for c in &self.usage_counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut r = ByteReader::new(&bytes, path);
        header(&mut r, path, MODEL_MAGIC, "codec checkpoint")?;
        let len = r.u32()? as usize;
        let config: VqVaeConfig = serde_json::from_slice(r.take(len)?)?;
        let stored = read_param_table(&mut r, path)?;
        let n = r.u32()? as usize;
        let usage_counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        // Rebuild the layout, then overwrite every tensor from the file.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = crate::numerics::ParamStore::new();
        let net = VqNet::new(config, &mut params, &mut rng)?;
        if params.load_matching(&stored) != params.len() || stored.len() != params.len() {
            return Err(Error::format(
                path,
                "parameter table does not match the codec layout",
            ));
        }
        Ok(VqVae {
            net,
            params,
            usage_counts,
        })
    }
}
