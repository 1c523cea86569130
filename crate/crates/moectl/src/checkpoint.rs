//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "MOECKPT\0"
//! version    u32
//! config     u32 length + UTF-8 `key = value` lines
//! step       u64      completed optimiser steps
//! seed       u64      batch-stream seed
//! count      u32      number of parameters
//! parameter  u32 name length, name, u32 rank, rank × u64 extents, f64 data
//! digest     32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use moe_edit_core::model::EditModel;
use moe_edit_core::training::Checkpoint;
use moe_edit_core::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{from_kv, to_kv};
use crate::error::{CliError, CliResult, Kind};

pub const MAGIC: [u8; 8] = *b"MOECKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(Kind::Io, e.to_string())
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = to_kv(ckpt.model.config(), &ckpt.train);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.train.seed.to_le_bytes());
    let store = ckpt.model.store();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Digest);
    }
    let mut r = Reader { bytes: body, pos: r.pos };
    let (model_config, train) = from_kv(r.string()?).map_err(CheckpointError::Corrupt)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    if seed != train.seed {
        return Err(CheckpointError::Corrupt(format!(
            "seed {seed} disagrees with config seed {}",
            train.seed
        )));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store.add(name, t).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let model = EditModel::from_store(model_config, store).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(Checkpoint { model, train, step })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, encode(ckpt)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use moe_edit_core::model::ModelConfig;
    use moe_edit_core::training::TrainConfig;

    fn sample() -> Checkpoint {
        let train = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        Checkpoint {
            model: EditModel::new(train.apply(ModelConfig::tiny()), 5).unwrap(),
            train,
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = decode(&encode(&c)).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.train, c.train);
        assert_eq!(back.model.config(), c.model.config());
        for (a, b) in c.model.store().iter().zip(back.model.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode(&back), encode(&c));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&sample());
        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        assert_eq!(decode(&magic).unwrap_err(), CheckpointError::Magic);
        let mut version = bytes.clone();
        version[8] = 9;
        assert_eq!(decode(&version).unwrap_err(), CheckpointError::Version(9));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert_eq!(decode(&flipped).unwrap_err(), CheckpointError::Digest);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
