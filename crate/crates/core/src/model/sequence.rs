use crate::error::{Error, Result};
use crate::sim::Observation;
use crate::tokenizer::{Segment, TokenizerSpec, BOS, EOS, SEP};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceItem {
    Token(u32),
    /// Index into [`Sequence::patches`].
    Patch(usize),
}

/// One model input: `[BOS] patches [SEP] text [SEP] (7 robot tokens [EOS])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub items: Vec<SequenceItem>,
    pub segments: Vec<Segment>,
    /// Row-major patch pixels scaled to `[0, 1]`, `patch * patch` values per patch.
    pub patches: Vec<f32>,
    /// True on positions whose token is supervised (robot tokens and EOS).
    pub loss_mask: Vec<bool>,
    /// Position of the second SEP; generation continues after it.
    pub prompt_end: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, SequenceItem::Patch(_)))
            .count()
    }

    /// `(position predicting, token predicted)` for every supervised token.
    pub fn targets(&self) -> Vec<(usize, u32)> {
        self.items
            .iter()
            .enumerate()
            .filter(|(p, _)| self.loss_mask[*p])
            .map(|(p, it)| match it {
                SequenceItem::Token(id) => (p - 1, *id),
                SequenceItem::Patch(_) => unreachable!("patches are never supervised"),
            })
            .collect()
    }
}

pub fn patchify(obs: &Observation, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || obs.height % patch != 0 || obs.width % patch != 0 {
        return Err(Error::invalid(format!(
            "patch size {patch} does not divide a {}x{} image",
            obs.height, obs.width
        )));
    }
    let (ph, pw) = (obs.height / patch, obs.width / patch);
    let mut out = Vec::with_capacity(obs.height * obs.width);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                let row = pr * patch + r;
                let base = row * obs.width + pc * patch;
                out.extend(obs.pixels[base..base + patch].iter().map(|&p| p as f32 / 255.0));
            }
        }
    }
    Ok(out)
}

/// Lays out one example. Without `target` the sequence stops at the second SEP.
pub fn assemble_sequence(
    obs: &Observation,
    instruction: &[u32],
    target: Option<&[u32; 7]>,
    tok: &TokenizerSpec,
    cfg: &ModelConfig,
) -> Result<Sequence> {
    if let Some(&bad) = instruction
        .iter()
        .find(|&&id| tok.segment_of(id) != Segment::Text)
    {
        return Err(Error::invalid(format!("instruction id {bad} is not a text token")));
    }
    let patches = patchify(obs, cfg.patch)?;
    let n_patches = patches.len() / cfg.patch_dim();
    let len = 3 + n_patches + instruction.len() + target.map_or(0, |_| 8);
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }

    let mut layout = Vec::with_capacity(len);
    layout.push((SequenceItem::Token(BOS), Segment::Special));
    layout.extend((0..n_patches).map(|p| (SequenceItem::Patch(p), Segment::Visual)));
    layout.push((SequenceItem::Token(SEP), Segment::Special));
    layout.extend(instruction.iter().map(|&id| (SequenceItem::Token(id), Segment::Text)));
    layout.push((SequenceItem::Token(SEP), Segment::Special));
    let prompt_end = layout.len() - 1;
    if let Some(bins) = target {
        for &b in bins {
            if b >= tok.bin_size() {
                return Err(Error::invalid(format!("target bin {b} out of range")));
            }
            layout.push((SequenceItem::Token(tok.bin_to_id(b)), Segment::Action));
        }
        layout.push((SequenceItem::Token(EOS), Segment::Special));
    }
    let loss_mask = (0..layout.len()).map(|p| p > prompt_end).collect();
    let (items, segments) = layout.into_iter().unzip();
    Ok(Sequence {
        items,
        segments,
        patches,
        loss_mask,
        prompt_end,
    })
}
