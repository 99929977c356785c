//! Layout: magic, u32 version, u32 JSON length, JSON header (model shape and
//! loop state), model parameter table, u8 flag + best-epoch parameter table,
//! u8 flag + optimizer (u64 step, JSON config, per-tensor first and second
//! moments).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_atomic, ByteReader};
use crate::models::{ModelVariant, Transformer, TransformerConfig, TransformerModel};
use crate::numerics::serial::{read_f64s, read_param_table, write_f64s, write_param_table};
use crate::numerics::{Adam, AdamConfig, ParamStore, Precision};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VQMIRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    variant: ModelVariant,
    n_classes: usize,
    state: TrainState,
}

fn write_json(buf: &mut Vec<u8>, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec(value)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(r: &mut ByteReader<'_>, path: &Path) -> Result<T> {
    let n = r.u32()? as usize;
    serde_json::from_slice(r.take(n)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes model and loop state atomically. `Precision::F64` makes a resumed
/// run bit-identical to an uninterrupted one.
pub fn save_checkpoint(
    path: &Path,
    model: &TransformerModel,
    state: &TrainState,
    precision: Precision,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_json(
        &mut buf,
        &Header {
            config: model.net.config.clone(),
            variant: model.net.variant,
            n_classes: model.net.n_classes,
            state: state.clone(),
        },
    )?;
    write_param_table(&mut buf, &model.params, precision);
    match &state.best_params {
        Some(p) => {
            buf.push(1);
            write_param_table(&mut buf, p, precision);
        }
        None => buf.push(0),
    }
    match &state.adam {
        Some(adam) => {
            buf.push(1);
            buf.extend_from_slice(&adam.step.to_le_bytes());
            write_json(&mut buf, &adam.config)?;
            buf.extend_from_slice(&(adam.m.len() as u32).to_le_bytes());
            for (m, v) in adam.m.iter().zip(&adam.v) {
                write_f64s(&mut buf, m, precision);
                write_f64s(&mut buf, v, precision);
            }
        }
        None => buf.push(0),
    }
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerModel, TrainState)> {
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a training checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = read_json(&mut r, path)?;
    let stored = read_param_table(&mut r, path)?;
    let best = match r.take(1)?[0] {
        0 => None,
        _ => Some(read_param_table(&mut r, path)?),
    };
    let adam = match r.take(1)?[0] {
        0 => None,
        _ => {
            let step = r.u64()?;
            let config: AdamConfig = read_json(&mut r, path)?;
            let n = r.u32()? as usize;
            let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                m.push(read_f64s(&mut r, path)?);
                v.push(read_f64s(&mut r, path)?);
            }
            Some(Adam { config, step, m, v })
        }
    };
    r.finish()?;

    let mut params = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let net = Transformer::new(
        header.config,
        header.variant,
        header.n_classes,
        &mut params,
        &mut rng,
    )?;
    let loaded = params.load_matching(&stored);
    if loaded != params.len() || stored.len() != params.len() {
        return Err(Error::format(
            path,
            format!(
                "parameter table has {} tensors, {loaded} of {} expected matched",
                stored.len(),
                params.len()
            ),
        ));
    }
    if let Some(a) = &adam {
        let shapes_ok = a.m.len() == params.len()
            && params
                .iter()
                .zip(a.m.iter().zip(&a.v))
                .all(|((_, p), (m, v))| m.len() == p.value.len() && v.len() == p.value.len());
        if !shapes_ok {
            return Err(Error::format(
                path,
                "optimizer moments do not match the model",
            ));
        }
    }
    let mut state = header.state;
    state.adam = adam;
    state.best_params = best;
    Ok((TransformerModel { net, params }, state))
}
