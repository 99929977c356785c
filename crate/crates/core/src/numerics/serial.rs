//! Binary named-parameter tables shared by model checkpoints.
//!
//! Layout (little-endian): u32 count, then per tensor: u32 name length, UTF-8
//! name, u32 rank, u32 dims, u8 dtype tag (4 = f32, 8 = f64), values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io_util::ByteReader;

/// Storage width of parameter values on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

pub fn write_f64s(buf: &mut Vec<u8>, values: &[f64], precision: Precision) {
    buf.push(precision.tag());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        match precision {
            Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

pub(crate) fn read_f64s(r: &mut ByteReader<'_>, path: &Path) -> Result<Vec<f64>> {
    let tag = r.take(1)?[0];
    let n = r.u64()? as usize;
    match tag {
        4 => (0..n).map(|_| r.f32().map(f64::from)).collect(),
        8 => (0..n).map(|_| r.f64()).collect(),
        t => Err(Error::format(path, format!("unknown dtype tag {t}"))),
    }
}

pub fn write_param_table(buf: &mut Vec<u8>, store: &ParamStore, precision: Precision) {
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        write_f64s(buf, p.value.data(), precision);
    }
}

pub(crate) fn read_param_table(r: &mut ByteReader<'_>, path: &Path) -> Result<ParamStore> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = read_f64s(r, path)?;
        let value = Tensor::new(shape, data)
            .map_err(|_| Error::format(path, format!("shape/data mismatch for {name}")))?;
        if store.find(&name).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name}")));
        }
        store.add(name, value);
    }
    Ok(store)
}
