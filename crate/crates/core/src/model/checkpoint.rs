//! Checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header,
//! then every parameter as little-endian `f32` in tensor-directory order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Params, TensorInfo};
use crate::common::RngStream;
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VLACKPT1";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub stream: RngStream,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(stream: RngStream, rng: &ChaCha8Rng) -> Self {
        RngState {
            stream,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = self.stream.rng();
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tokenizer: TokenizerSpec,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    pub rng: RngState,
    /// Free-form training metadata (configs, seeds); stored verbatim.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, step: u64, rng: RngState) -> Self {
        Checkpoint {
            model,
            step,
            rng,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config,
            tokenizer: self.model.tokenizer.clone(),
            step: self.step,
            rng: self.rng,
            tensors: self.model.params.tensors().to_vec(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.model.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        header.model.validate()?;
        let params = Params::from_values(&header.model, header.tokenizer.vocab_size(), values)
            .ok_or_else(|| bad("payload size does not match the model config"))?;
        if params.tensors() != header.tensors.as_slice() {
            return Err(bad("tensor directory does not match the model config"));
        }
        Ok(Checkpoint {
            model: Model::from_params(header.model, header.tokenizer, params)?,
            step: header.step,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn tokenizer(&self) -> &TokenizerSpec {
        &self.model.tokenizer
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
