//! Checkpoint file: `"L2R1"`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in [`Params::named`]
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Params};
use super::tensor::Real;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"L2R1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Candidate-set size the policies were trained with.
    pub k: usize,
    pub gamma: f64,
    /// Free-form training configuration and provenance.
    #[serde(default)]
    pub training: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

pub fn encode<T: Real>(params: &Params<T>, k: usize, gamma: f64, training: serde_json::Value) -> Result<Vec<u8>> {
    let named = params.named();
    let header = CheckpointHeader {
        model: params.config,
        k,
        gamma,
        training,
        tensors: named.iter().map(|(n, t)| TensorMeta { name: n.clone(), rows: t.rows, cols: t.cols }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in &t.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let trunc = || Error::Parse { line: 0, msg: "truncated checkpoint".into() };
    if bytes.len() < 8 {
        return Err(trunc());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::IncompatibleCheckpoint("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(trunc)?;
    let header: CheckpointHeader = serde_json::from_slice(body)
        .map_err(|e| Error::Parse { line: e.line(), msg: format!("checkpoint header: {e}") })?;
    Ok((header, 8 + len))
}

/// Decodes a checkpoint. When `expect` is given, the stored architecture must
/// match it exactly.
pub fn decode<T: Real>(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<(Params<T>, CheckpointHeader)> {
    let (header, mut off) = decode_header(bytes)?;
    if let Some(e) = expect {
        if *e != header.model {
            return Err(Error::IncompatibleCheckpoint(format!(
                "architecture {:?} does not match expected {:?}",
                header.model, e
            )));
        }
    }
    let mut params = Params::<T>::init(header.model, 0);
    {
        let named = params.named_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::IncompatibleCheckpoint("tensor count mismatch".into()));
        }
        for ((name, t), meta) in named.into_iter().zip(&header.tensors) {
            if name != meta.name || t.rows != meta.rows || t.cols != meta.cols {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} {}x{} does not match {} {}x{}",
                    meta.name, meta.rows, meta.cols, name, t.rows, t.cols
                )));
            }
            let need = 4 * t.data.len();
            let chunk = bytes
                .get(off..off + need)
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("truncated checkpoint in `{name}`") })?;
            for (dst, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64);
            }
            off += need;
        }
    }
    if off != bytes.len() {
        return Err(Error::Parse { line: 0, msg: "trailing bytes after checkpoint".into() });
    }
    Ok((params, header))
}

pub fn save<T: Real>(
    path: impl AsRef<Path>,
    params: &Params<T>,
    k: usize,
    gamma: f64,
    training: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode(params, k, gamma, training)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>, expect: Option<&ModelConfig>) -> Result<(Params<T>, CheckpointHeader)> {
    decode(&std::fs::read(path)?, expect)
}
