use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::optim::{clip_grad_norm, lr_at, Adam};
use super::transformer::Batch;
use super::{Checkpoint, Model, ModelConfig, Sequence};
use crate::common::derive_stream;
use crate::dataset::{mix_epoch_indices, observation_of, state_count, ImageDims, MixConfig, RecordKind, SampleRecord};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            warmup_steps: 100,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr) || !pos(self.grad_clip) {
            return Err(Error::invalid("train config: lr and grad_clip must be positive"));
        }
        if self.warmup_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "train config: warmup_steps, batch_size and epochs must be positive",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, epoch_len: usize) -> usize {
        epoch_len.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Masked-token accuracy over the epoch's training batches.
    pub acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

fn record_sequence(
    r: &SampleRecord,
    tok: &TokenizerSpec,
    image: &ImageDims,
    cfg: &ModelConfig,
) -> Result<Sequence> {
    let text = tok.encode_text(&r.instruction)?;
    super::assemble_sequence(&observation_of(r, image), &text, Some(&r.target), tok, cfg)
}

/// Trains a fresh model on action records mixed with state records each epoch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    tok: &TokenizerSpec,
    image: &ImageDims,
    actions: &[SampleRecord],
    states: &[SampleRecord],
    mix: &MixConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    mix.validate()?;
    if actions.is_empty() {
        return Err(Error::invalid("training needs at least one action record"));
    }
    let epoch_len = actions.len() + state_count(actions.len(), mix.state_ratio);
    let per_epoch = cfg.steps_per_epoch(epoch_len);
    let total = per_epoch * cfg.epochs;
    if cfg.warmup_steps > total {
        return Err(Error::invalid(format!(
            "warmup_steps {} exceeds the {total} total steps",
            cfg.warmup_steps
        )));
    }

    let build = |rs: &[SampleRecord]| -> Result<Vec<Sequence>> {
        rs.iter().map(|r| record_sequence(r, tok, image, model_cfg)).collect()
    };
    let action_seqs = build(actions)?;
    let state_seqs = if mix.state_ratio > 0.0 { build(states)? } else { Vec::new() };

    let mut model: Model<f32> = Model::new(*model_cfg, tok.clone(), derive_stream(cfg.seed, 0))?;
    let dropout_stream = derive_stream(cfg.seed, 1);
    let mut dropout_rng = dropout_stream.rng();
    let mut opt = Adam::new(model.params.len());
    let mut grads = model.params.zeros_like();
    let mut steps = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = mix_epoch_indices(action_seqs.len(), state_seqs.len(), mix, epoch as u64)?;
        let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Batch<f32> = Batch::new(chunk.iter().map(|&(kind, i)| match kind {
                RecordKind::Action => &action_seqs[i],
                RecordKind::State => &state_seqs[i],
            }));
            grads.iter_mut().for_each(|g| *g = 0.0);
            let dropout = (model_cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let stats = model.loss_and_grad(&batch, dropout, &mut grads)?;
            let loss = stats.loss as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = lr_at(step, total, cfg.warmup_steps, cfg.lr);
            opt.step(&mut model.params.values, &grads, lr);
            steps.push(StepMetrics {
                step,
                lr,
                loss,
                acc: stats.correct as f64 / stats.count as f64,
            });
            loss_sum += loss * stats.count as f64;
            correct += stats.correct;
            count += stats.count;
            step += 1;
        }
        epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / count as f64,
            acc: correct as f64 / count as f64,
        });
    }

    let mut checkpoint = Checkpoint::new(model, step as u64, RngState::capture(dropout_stream, &dropout_rng));
    checkpoint.meta = serde_json::json!({ "train": cfg, "mix": mix });
    Ok(TrainOutcome {
        checkpoint,
        steps,
        epochs,
    })
}
