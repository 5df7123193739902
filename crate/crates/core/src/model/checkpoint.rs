//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `TLMCKPT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{config, tensors: {name: {shape, offset, dtype}}}`
//! and the raw little-endian payload. Offsets are byte offsets into the
//! payload, which stores tensors in canonical parameter order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, TinyLM};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"TLMCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: Dtype,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn to_bytes(model: &TinyLM, dtype: Dtype) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for t in model.params().tensors() {
        tensors.insert(
            t.name.clone(),
            TensorEntry {
                shape: t.shape.clone(),
                offset: payload.len(),
                dtype,
            },
        );
        for &x in t.data {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &TinyLM, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_as(model, path, Dtype::F64)
}

pub fn save_checkpoint_as(model: &TinyLM, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    std::fs::write(path, to_bytes(model, dtype)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyLM> {
    from_bytes(&std::fs::read(path)?, None)
}

/// Loads a checkpoint that must match `expected`'s tensor shapes.
pub fn load_checkpoint_with_config(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TinyLM> {
    from_bytes(&std::fs::read(path)?, Some(expected))
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            needed: 12,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12 + len;
    if bytes.len() < end {
        return Err(CheckpointError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = std::fs::read(path)?;
    Ok(split_header(&bytes)?.0)
}

pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TinyLM> {
    let (header, payload) = split_header(bytes)?;
    let config = match expected {
        Some(cfg) => cfg.clone(),
        None => header.config.clone(),
    };
    config
        .validate()
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut params = Params::zeros(&config);
    let names: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if header.tensors.len() != names.len() {
        return Err(CheckpointError::TensorCount {
            expected: names.len(),
            found: header.tensors.len(),
        }
        .into());
    }
    for ((name, shape), dst) in names.iter().zip(params.tensors_mut()) {
        let entry = header.tensors.get(name).ok_or_else(|| {
            CheckpointError::CorruptHeader(format!("missing tensor {name}"))
        })?;
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            }
            .into());
        }
        let size = entry.dtype.size();
        let needed = entry.offset + dst.len() * size;
        if payload.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                available: payload.len(),
            }
            .into());
        }
        let raw = &payload[entry.offset..needed];
        for (x, chunk) in dst.iter_mut().zip(raw.chunks_exact(size)) {
            *x = match entry.dtype {
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                Dtype::F32 => f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes"))),
            };
        }
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    TinyLM::from_params(header.config, params).map_err(|e| match e {
        Error::InvalidInput(m) => CheckpointError::CorruptHeader(m).into(),
        other => other,
    })
}
