//! Binary checkpoints.
//!
//! Layout: `D2TF`, format version (u32 LE), header length (u64 LE), JSON
//! header, little-endian tensor data in header order (parameters, then Adam
//! first and second moments when present), and a trailing SHA-256 of all
//! preceding bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{AdamState, TrainConfig};
use super::{ModelConfig, ModelError, ModelParams, TENSOR_NAMES};
use crate::numeric::Real;

pub const MAGIC: &[u8; 4] = b"D2TF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed training steps.
    pub step: u64,
    pub schema_digest: Option<String>,
    pub vocab_digest: Option<String>,
    pub tensors: Vec<TensorInfo>,
    /// Updates recorded in the Adam state, when the moments are stored.
    pub adam_updates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ModelParams<F>,
    pub adam: Option<AdamState<F>>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub schema_digest: Option<String>,
    pub vocab_digest: Option<String>,
}

fn err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

impl<F: Real> Checkpoint<F> {
    pub fn new(params: ModelParams<F>) -> Self {
        Checkpoint { params, adam: None, train: None, step: 0, schema_digest: None, vocab_digest: None }
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            dtype: F::DTYPE.to_string(),
            model: self.params.config,
            train: self.train.clone(),
            step: self.step,
            schema_digest: self.schema_digest.clone(),
            vocab_digest: self.vocab_digest.clone(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| TensorInfo { name: n.to_string(), shape: [t.nrows(), t.ncols()] })
                .collect(),
            adam_updates: self.adam.as_ref().map(|a| a.t),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serialization cannot fail");
        let mut out = Vec::with_capacity(16 + header.len() + self.params.parameter_count() * F::BYTES * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut sections = vec![&self.params];
        if let Some(a) = &self.adam {
            sections.push(&a.m);
            sections.push(&a.v);
        }
        for p in sections {
            for t in p.tensors() {
                for &x in t.iter() {
                    x.write_le(&mut out);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| err("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| err(format!("header: {e}")))?;
        header.model.validate()?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(err(format!("unknown dtype `{other}`"))),
        };
        let mut data = &body[header_end..];
        let read_section = |data: &mut &[u8]| -> Result<ModelParams<F>, ModelError> {
            let mut p = ModelParams::<F>::zeros(header.model);
            for (t, info) in p.tensors_mut().into_iter().zip(&header.tensors) {
                if [t.nrows(), t.ncols()] != info.shape {
                    return Err(err(format!("tensor {} has shape {:?}, config implies {:?}", info.name, info.shape, t.dim())));
                }
                let n = t.len() * width;
                if data.len() < n {
                    return Err(err("truncated tensor data"));
                }
                let (chunk, rest) = data.split_at(n);
                for (x, b) in t.iter_mut().zip(chunk.chunks_exact(width)) {
                    *x = if width == 4 { F::of(f32::read_le(b) as f64) } else { F::of(f64::read_le(b)) };
                }
                *data = rest;
            }
            Ok(p)
        };
        if header.tensors.len() != TENSOR_NAMES.len() {
            return Err(err("tensor list does not match the model"));
        }
        let params = read_section(&mut data)?;
        let adam = match header.adam_updates {
            Some(t) => Some(AdamState { m: read_section(&mut data)?, v: read_section(&mut data)?, t }),
            None => None,
        };
        if !data.is_empty() {
            return Err(err("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            params,
            adam,
            train: header.train,
            step: header.step,
            schema_digest: header.schema_digest,
            vocab_digest: header.vocab_digest,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
