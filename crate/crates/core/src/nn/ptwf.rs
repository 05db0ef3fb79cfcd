//! `.ptwf` weight files.
//!
//! Layout: the magic bytes `PTWF`, a little-endian `u32` version (1), a
//! little-endian `u64` metadata length, UTF-8 JSON metadata, then the
//! contiguous little-endian `f64` payload. Offsets in the metadata are
//! relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTWF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    #[serde(default = "default_trainable")]
    pub trainable: bool,
}

fn default_trainable() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default)]
    pub rng_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            byte_offset: offset,
            trainable: p.trainable,
        });
        offset += 8 * p.tensor.numel() as u64;
    }
    let meta = serde_json::to_vec(&Metadata {
        rng_seed: store.rng_seed,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |msg: &str| Error::WeightFile(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing PTWF magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("metadata length exceeds file size"))?;
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
    let payload = &bytes[meta_end..];
    let mut store = ParamStore::new(meta.rng_seed);
    for entry in meta.tensors {
        if entry.dtype != "f64" {
            return Err(Error::WeightFile(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + 8 * numel;
        if end > payload.len() {
            return Err(Error::WeightFile(format!("{}: payload truncated", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?, entry.trainable)?;
    }
    Ok(store)
}

/// Writes atomically: the bytes go to a sibling temp file that is then
/// renamed over `path`.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(store)?)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
