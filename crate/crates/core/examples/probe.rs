//! Linear probes for the robot state: ground-truth features versus a frozen random-init model.

use rosa::collect::{collect_states, SceneType, StateCollectConfig};
use rosa::common::derive_stream;
use rosa::eval::{linear_probe, probe_features, ProbeConfig};
use rosa::model::{Model, ModelConfig};
use rosa::sim::{default_tasks, SimConfig};
use rosa::tokenizer::TokenizerSpec;

fn main() -> rosa::Result<()> {
    let sim = SimConfig::default();
    let samples = collect_states(
        SceneType::Relevant,
        &default_tasks(),
        10,
        30,
        &sim,
        &StateCollectConfig::default(),
        derive_stream(5, 0),
    )?;
    let cfg = ProbeConfig::default();
    let targets: Vec<[f64; 7]> = samples.iter().map(|s| s.state.to_array()).collect();
    let oracle: Vec<Vec<f64>> = targets.iter().map(|t| t.to_vec()).collect();
    let upper = probe_features(&oracle, &targets, &cfg)?;
    let tok = TokenizerSpec::for_workspace(&sim.workspace, 256);
    let model: Model = Model::new(ModelConfig::default(), tok, derive_stream(0, 0))?;
    let random = linear_probe(&model, &samples, &cfg)?;
    println!("{} samples, tau {} m", samples.len(), cfg.tau);
    println!("oracle      acc {:.3}  mse {:.2e}", upper.accuracy, upper.mean_mse);
    println!("random init acc {:.3}  mse {:.2e}", random.accuracy, random.mean_mse);
    println!("random init per-dim mse {:?}", random.per_dim_mse.map(|v| (v * 1e4).round() / 1e4));
    Ok(())
}
