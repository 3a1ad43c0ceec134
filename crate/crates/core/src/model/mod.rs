//! A small causal transformer over `[BOS] patches [SEP] words [SEP] robot tokens [EOS]`.
//!
//! Image patches are embedded by a single learned linear map and share the residual
//! stream with word and robot-token embeddings. Gradients are computed by explicit
//! reverse-mode passes over each layer; parameters live in one flat buffer so the
//! optimizer and the checkpoint code can treat them uniformly.

mod checkpoint;
mod optim;
mod params;
mod scalar;
mod sequence;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{sha256_hex, Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use optim::{clip_grad_norm, lr_at, Adam};
pub use params::{Params, Slot, TensorInfo};
pub use scalar::Scalar;
pub use sequence::{assemble_sequence, patchify, Sequence, SequenceItem};
pub use train::{train, EpochMetrics, StepMetrics, TrainConfig, TrainOutcome};
pub use transformer::{argmax, softmax, Batch, BatchStats, DecodeCache, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Square patch side in pixels; must divide the image height and width.
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub max_seq_len: usize,
    /// Residual dropout on attention and MLP outputs.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            patch: 8,
            image_height: 48,
            image_width: 48,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("d_model, layers, heads and ffn must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return bad("patch size must divide the image height and width");
        }
        // BOS, patches, two SEPs, seven robot tokens and EOS, before any words
        if self.max_seq_len < self.num_patches() + 11 {
            return bad("max_seq_len cannot hold the visual tokens and a target");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }
}
