//! Named-tensor container file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "KSTENSR1"
//! offset 8   u64       byte length L of the JSON index
//! offset 16  L bytes   UTF-8 JSON: {"tensors":[{"name","shape","offset"}...],"meta":{...}}
//! offset 16+L          f64 blob; each tensor occupies product(shape) values
//!                      starting at element `offset` of the blob
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KSTENSR1";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    tensors: Vec<IndexEntry>,
    #[serde(default)]
    meta: Value,
}

pub fn encode(tensors: &ParamSet, meta: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors.iter() {
        entries.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let index = serde_json::to_vec(&Index {
        tensors: entries,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + index.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for (_, t) in tensors.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet, Value)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let index_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated index"))?;
    let index: Index = serde_json::from_slice(&bytes[16..index_end])?;
    let blob = &bytes[index_end..];
    if blob.len() % 8 != 0 {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut set = ParamSet::new();
    for e in index.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("tensor `{}` out of range", e.name)))?;
        set.insert(&e.name, Tensor::new(e.shape, data.to_vec()).map_err(|err| bad(&err.to_string()))?);
    }
    Ok((set, index.meta))
}

pub fn save(path: &Path, tensors: &ParamSet, meta: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(tensors, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, Value)> {
    decode(&fs::read(path)?)
}
