//! Collects expert and state-estimation data, writes a corpus directory and reads it back.
//!
//! Usage: `cargo run --example build_corpus -- [out_dir]`

use std::path::PathBuf;

use rosa::collect::{collect_demos, collect_states, ExpertConfig, SceneType, StateCollectConfig};
use rosa::common::derive_stream;
use rosa::dataset::{build_action_samples, build_state_samples, Corpus, CorpusMeta, ImageDims, Provenance};
use rosa::keyframe::KeyframeConfig;
use rosa::sim::{default_tasks, SimConfig};
use rosa::tokenizer::TokenizerSpec;

fn main() -> rosa::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/corpus".into()));
    let sim = SimConfig::default();
    let tasks = default_tasks();
    let tok = TokenizerSpec::for_workspace(&sim.workspace, 256);

    let demos = collect_demos(&tasks, 3, &sim, &ExpertConfig::default(), derive_stream(0, 0))?;
    let actions = build_action_samples(&demos, &KeyframeConfig::default(), &tok)?;
    let samples = collect_states(
        SceneType::Relevant,
        &tasks,
        5,
        20,
        &sim,
        &StateCollectConfig::default(),
        derive_stream(0, 1),
    )?;
    let states = build_state_samples(&samples, &tok)?;

    let corpus = Corpus {
        meta: CorpusMeta {
            tokenizer: tok,
            workspace: sim.workspace,
            image: ImageDims {
                height: sim.image_height,
                width: sim.image_width,
            },
            actions: actions.len(),
            states: states.len(),
            provenance: Provenance {
                source: "example".into(),
                seed: 0,
                tasks: tasks.iter().map(|t| t.name.clone()).collect(),
                detail: serde_json::Value::Null,
            },
        },
        actions,
        states,
    };
    corpus.write(&out)?;
    let back = Corpus::read(&out)?;
    assert_eq!(back, corpus);
    println!(
        "{} demos -> {} action records; {} state records; written to {}",
        demos.len(),
        back.actions.len(),
        back.states.len(),
        out.display()
    );
    let r = &back.actions[0];
    println!("first record: task {:?}, frame {}, target bins {:?}", r.task, r.frame, r.target);
    Ok(())
}
