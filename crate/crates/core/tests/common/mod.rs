#![allow(dead_code)]

use rand::Rng;
use rosa::common::{derive_stream, Workspace};
use rosa::model::{Batch, Model, ModelConfig, Sequence};
use rosa::sim::Observation;
use rosa::tokenizer::TokenizerSpec;

pub fn noise_observation(h: usize, w: usize, seed: u64) -> Observation {
    let mut rng = derive_stream(seed, 99).rng();
    Observation {
        height: h,
        width: w,
        pixels: (0..h * w).map(|_| rng.random()).collect(),
        timestep: 0,
    }
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        patch: 4,
        image_height: 8,
        image_width: 8,
        max_seq_len: 32,
        dropout: 0.0,
    }
}

pub fn micro_model(seed: u64) -> Model<f64> {
    let tok = TokenizerSpec::for_workspace(&Workspace::default(), 16);
    let mut m = Model::<f64>::new(micro_config(), tok, derive_stream(seed, 0)).unwrap();
    // larger weights than the default init so every path carries signal
    let mut rng = derive_stream(seed, 1).rng();
    for v in m.params.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    m
}

pub fn micro_sequences(model: &Model<f64>, seed: u64) -> Vec<Sequence> {
    let mut rng = derive_stream(seed, 2).rng();
    let texts = ["put the cube in the bowl", "what is the current state of the robot"];
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let obs = noise_observation(8, 8, seed * 10 + i as u64);
            let ids = model.tokenizer.encode_text(t).unwrap();
            let bins: [u32; 7] = std::array::from_fn(|_| rng.random_range(0..16));
            model.sequence(&obs, &ids, Some(&bins)).unwrap()
        })
        .collect()
}

pub struct TensorError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Central finite differences of the mean loss against the analytic gradient, per tensor.
///
/// Relative error of an element is `|a - n| / max(|a|, |n|)`; elements where both are
/// below `floor` are compared in absolute terms only.
pub fn gradient_check(model: &Model<f64>, seqs: &[Sequence], h: f64, floor: f64) -> Vec<TensorError> {
    let batch: Batch<f64> = Batch::new(seqs.iter());
    let mut analytic = model.params.zeros_like();
    model.loss_and_grad(&batch, None, &mut analytic).unwrap();
    let mut probe = model.clone();
    let tensors = model.params.tensors().to_vec();
    tensors
        .iter()
        .map(|t| {
            let len: usize = t.shape.iter().product();
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for i in t.offset..t.offset + len {
                let orig = probe.params.values[i];
                probe.params.values[i] = orig + h;
                let lp = probe.loss(&batch).unwrap();
                probe.params.values[i] = orig - h;
                let lm = probe.loss(&batch).unwrap();
                probe.params.values[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[i];
                let diff = (a - numeric).abs();
                max_abs = max_abs.max(diff);
                let scale = a.abs().max(numeric.abs());
                if scale >= floor {
                    max_rel = max_rel.max(diff / scale);
                }
            }
            TensorError {
                name: t.name.clone(),
                max_rel,
                max_abs,
            }
        })
        .collect()
}

use rosa::common::Gripper;
use rosa::keyframe::TrajectoryPoint;
use std::collections::VecDeque;

/// Line-by-line transcription of the keyframe pseudocode, with `recent_buffer` as a
/// sliding window over the last `window` frames recording whether each was a static pick.
pub fn oracle_keyframes(d: &[TrajectoryPoint], epsilon: f64, window: usize) -> Vec<usize> {
    let n = d.len() - 1;
    let norm = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut k = std::collections::BTreeSet::from([0, n]);
    let mut recent_buffer: VecDeque<bool> = VecDeque::new();
    for i in 1..n {
        let dp = norm(d[i].position, d[i - 1].position) + norm(d[i + 1].position, d[i].position);
        let mut picked = false;
        if dp < epsilon && !recent_buffer.iter().any(|&s| s) {
            k.insert(i);
            picked = true;
        }
        recent_buffer.push_back(picked);
        if recent_buffer.len() > window {
            recent_buffer.pop_front();
        }
        if d[i].gripper != d[i - 1].gripper || d[i].gripper != d[i + 1].gripper {
            k.insert(i);
        }
    }
    k.into_iter().collect()
}

/// Random walk with pauses, near-threshold creeps and gripper toggles.
pub fn random_trajectory(rng: &mut impl Rng) -> Vec<TrajectoryPoint> {
    let len = rng.random_range(2..80);
    let mut p = [rng.random_range(-0.4..0.4), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)];
    let mut g = Gripper::Open;
    let mut out = Vec::with_capacity(len);
    let mut mode = 0;
    for _ in 0..len {
        if rng.random_bool(0.2) {
            mode = rng.random_range(0..3);
        }
        let step = match mode {
            0 => 0.0,
            1 => rng.random_range(0.0..0.002),
            _ => rng.random_range(0.005..0.02),
        };
        let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
        for a in 0..3 {
            p[a] += step * dir[a] / n;
        }
        if rng.random_bool(0.08) {
            g = if g == Gripper::Open { Gripper::Closed } else { Gripper::Open };
        }
        out.push(TrajectoryPoint { position: p, gripper: g });
    }
    out
}
