//! Trains a small policy on expert records mixed with state records, saves and reloads it.
//!
//! Usage: `cargo run --release --example train_policy -- [epochs] [ratio]`

use rosa::collect::{collect_demos, collect_states, ExpertConfig, SceneType, StateCollectConfig};
use rosa::common::derive_stream;
use rosa::dataset::{build_action_samples, build_state_samples, observation_of, parse_ratio, ImageDims, MixConfig};
use rosa::keyframe::KeyframeConfig;
use rosa::model::{train, Checkpoint, ModelConfig, TrainConfig};
use rosa::sim::{default_tasks, SimConfig};
use rosa::tokenizer::TokenizerSpec;

fn main() -> rosa::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));
    let ratio = parse_ratio(&args.next().unwrap_or_else(|| "1/4".into()))?;
    let sim = SimConfig::default();
    let tasks = default_tasks();
    let tok = TokenizerSpec::for_workspace(&sim.workspace, 256);
    let demos = collect_demos(&tasks, 5, &sim, &ExpertConfig::default(), derive_stream(1, 0))?;
    let actions = build_action_samples(&demos, &KeyframeConfig::default(), &tok)?;
    let samples = collect_states(SceneType::Relevant, &tasks, 10, 30, &sim, &StateCollectConfig::default(), derive_stream(1, 1))?;
    let states = build_state_samples(&samples, &tok)?;
    let image = ImageDims {
        height: 48,
        width: 48,
    };
    let cfg = TrainConfig {
        epochs,
        warmup_steps: 10,
        lr: 1e-3,
        ..Default::default()
    };
    let mix = MixConfig {
        state_ratio: ratio,
        seed: 1,
    };
    let out = train(&ModelConfig::default(), &cfg, &tok, &image, &actions, &states, &mix)?;
    for e in out.epochs.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:3}  loss {:.4}  acc {:.3}", e.epoch, e.loss, e.acc);
    }
    let path = std::env::temp_dir().join("rosa_example.ckpt");
    out.checkpoint.save(&path)?;
    let model = Checkpoint::load(&path)?.model;
    let r = &actions[0];
    let pred = model.generate(&observation_of(r, &image), &tok.encode_text(&r.instruction)?)?;
    println!("target  {:?}", tok.decode_action(&r.target)?.to_array());
    println!("predict {:?}", pred.to_array());
    println!("checkpoint {} ({})", path.display(), out.checkpoint.sha256());
    Ok(())
}
