//! Flat binary container of named f32 tensors.
//!
//! Layout: the 8-byte magic `QTCKPT01`, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then every tensor's elements as
//! little-endian `f32` in manifest order. The manifest lists `name`,
//! `shape`, `dtype` (always `"f32"`) and the element `offset` of each
//! tensor, plus a free-form `meta` object.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensorops::Tensor;

pub const MAGIC: &[u8; 8] = b"QTCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(tensors: &[(String, &Tensor)], meta: serde_json::Value) -> Result<Vec<u8>, ModelError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), dtype: "f32".into(), offset });
        offset += t.len();
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries, meta })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + manifest.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in tensors {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, serde_json::Value), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let data = &bytes[16 + mlen..];
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(bad("unsupported dtype"));
        }
        let n: usize = e.shape.iter().product();
        let raw = data.get(4 * e.offset..4 * (e.offset + n)).ok_or_else(|| bad("truncated data"))?;
        let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((e.name, Tensor::from_vec(&e.shape, vals)?));
    }
    Ok((out, manifest.meta))
}

pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(tensors, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    decode_checkpoint(&bytes)
}
