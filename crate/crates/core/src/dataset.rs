//! Training records, the on-disk corpus layout and the state/action epoch mixer.
//!
//! A corpus directory holds `meta.json`, `actions.jsonl` and `states.jsonl`. Each
//! JSONL line is one [`SampleRecord`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collect::{Demonstration, StateSample};
use crate::common::{derive_stream, Workspace};
use crate::error::{Error, Result};
use crate::keyframe::{self, KeyframeConfig, TrajectoryPoint};
use crate::sim::Observation;
use crate::tokenizer::{TokenizerSpec, STATE_INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// Target is the next keyframe pose.
    Action,
    /// Target is the current pose.
    State,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub instruction: String,
    pub pixels: Vec<u8>,
    pub target: [u32; 7],
    pub kind: RecordKind,
    pub task: Option<String>,
    pub demo_id: u64,
    pub frame: u64,
    pub seed: u64,
}

impl SampleRecord {
    pub fn validate(&self, tok: &TokenizerSpec, image_len: usize) -> Result<()> {
        if self.pixels.len() != image_len {
            return Err(Error::invalid(format!(
                "record has {} pixels, expected {image_len}",
                self.pixels.len()
            )));
        }
        if self.target.iter().any(|&b| b >= tok.bin_size()) {
            return Err(Error::invalid(format!("target {:?} has out-of-range bins", self.target)));
        }
        if self.kind == RecordKind::State && self.instruction != STATE_INSTRUCTION {
            return Err(Error::invalid("state record without the state instruction"));
        }
        Ok(())
    }
}

pub fn build_action_samples(
    demos: &[Demonstration],
    cfg: &KeyframeConfig,
    tok: &TokenizerSpec,
) -> Result<Vec<SampleRecord>> {
    if demos.is_empty() {
        return Err(Error::invalid("build_action_samples needs at least one demonstration"));
    }
    let mut out = Vec::new();
    for (id, demo) in demos.iter().enumerate() {
        let points: Vec<TrajectoryPoint> = demo
            .frames
            .iter()
            .map(|f| TrajectoryPoint {
                position: f.state.position(),
                gripper: f.state.gripper,
            })
            .collect();
        let keys = keyframe::extract(&points, cfg)?;
        for pair in keys.windows(2) {
            let (cur, next) = (&demo.frames[pair[0]], &demo.frames[pair[1]]);
            out.push(SampleRecord {
                instruction: demo.instruction.clone(),
                pixels: cur.observation.pixels.clone(),
                target: tok.encode_action(&next.state)?,
                kind: RecordKind::Action,
                task: Some(demo.task.clone()),
                demo_id: id as u64,
                frame: pair[0] as u64,
                seed: demo.seed,
            });
        }
    }
    Ok(out)
}

pub fn build_state_samples(samples: &[StateSample], tok: &TokenizerSpec) -> Result<Vec<SampleRecord>> {
    samples
        .iter()
        .map(|s| {
            Ok(SampleRecord {
                instruction: s.instruction.clone(),
                pixels: s.observation.pixels.clone(),
                target: tok.encode_action(&s.state)?,
                kind: RecordKind::State,
                task: s.task.clone(),
                demo_id: s.scene_index as u64,
                frame: s.observation.timestep,
                seed: s.seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    /// State records per action record in every epoch; 0 trains on actions alone.
    pub state_ratio: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            state_ratio: 0.25,
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.state_ratio >= 0.0 && self.state_ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "state_ratio must be >= 0, got {}",
                self.state_ratio
            )));
        }
        Ok(())
    }
}

/// Parses `0.25` or `1/4`.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let bad = || Error::invalid(format!("cannot parse ratio `{s}`"));
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(bad());
            }
            n / d
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !(v >= 0.0 && v.is_finite()) {
        return Err(bad());
    }
    Ok(v)
}

pub fn state_count(actions: usize, ratio: f64) -> usize {
    (actions as f64 * ratio).round() as usize
}

/// All action records plus a ratio-sized draw of state records, shuffled per epoch.
pub fn mix_epoch<'a>(
    actions: &'a [SampleRecord],
    states: &'a [SampleRecord],
    cfg: &MixConfig,
    epoch: u64,
) -> Result<Vec<&'a SampleRecord>> {
    Ok(mix_epoch_indices(actions.len(), states.len(), cfg, epoch)?
        .into_iter()
        .map(|(kind, i)| match kind {
            RecordKind::Action => &actions[i],
            RecordKind::State => &states[i],
        })
        .collect())
}

/// Index form of [`mix_epoch`]: `(pool, index)` pairs in epoch order.
pub fn mix_epoch_indices(
    n_actions: usize,
    n_states: usize,
    cfg: &MixConfig,
    epoch: u64,
) -> Result<Vec<(RecordKind, usize)>> {
    cfg.validate()?;
    if n_actions == 0 {
        return Err(Error::invalid("mix_epoch needs at least one action record"));
    }
    let draw = state_count(n_actions, cfg.state_ratio);
    if draw > 0 && n_states == 0 {
        return Err(Error::invalid("state_ratio > 0 but the state corpus is empty"));
    }
    let mut rng = derive_stream(cfg.seed, epoch).rng();
    let mut out: Vec<(RecordKind, usize)> = (0..n_actions).map(|i| (RecordKind::Action, i)).collect();
    if draw <= n_states {
        out.extend(index::sample(&mut rng, n_states, draw).into_iter().map(|i| (RecordKind::State, i)));
    } else {
        out.extend((0..draw).map(|_| (RecordKind::State, rng.random_range(0..n_states))));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub tokenizer: TokenizerSpec,
    pub workspace: Workspace,
    pub image: ImageDims,
    pub actions: usize,
    pub states: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub actions: Vec<SampleRecord>,
    pub states: Vec<SampleRecord>,
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = self.meta.clone();
        meta.actions = self.actions.len();
        meta.states = self.states.len();
        write_json(&dir.join("meta.json"), &meta)?;
        write_jsonl(&dir.join("actions.jsonl"), &self.actions)?;
        write_jsonl(&dir.join("states.jsonl"), &self.states)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let meta: CorpusMeta = read_json(&dir.join("meta.json"))?;
        let actions: Vec<SampleRecord> = read_jsonl(&dir.join("actions.jsonl"))?;
        let states: Vec<SampleRecord> = read_jsonl(&dir.join("states.jsonl"))?;
        if actions.len() != meta.actions || states.len() != meta.states {
            return Err(Error::invalid(format!(
                "{}: meta.json counts ({}, {}) disagree with the record files ({}, {})",
                dir.display(),
                meta.actions,
                meta.states,
                actions.len(),
                states.len()
            )));
        }
        let len = meta.image.height * meta.image.width;
        for r in actions.iter().chain(&states) {
            r.validate(&meta.tokenizer, len)?;
        }
        Ok(Corpus { meta, actions, states })
    }
}

pub fn observation_of(record: &SampleRecord, dims: &ImageDims) -> Observation {
    Observation {
        height: dims.height,
        width: dims.width,
        pixels: record.pixels.clone(),
        timestep: record.frame,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, 0, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e.line(), e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, i + 1, e))?);
    }
    Ok(out)
}
