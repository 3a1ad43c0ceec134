//! A miniature baseline-versus-mixed data-scale grid, end to end.
//!
//! Usage: `cargo run --release --example experiment -- [out_dir]`

use std::path::PathBuf;

use rosa::config::RunConfig;
use rosa::eval::{run_experiment, ExperimentKind};

fn main() -> rosa::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/experiment".into()));
    let mut cfg = RunConfig::default();
    cfg.train.lr = 1e-3;
    cfg.train.warmup_steps = 10;
    cfg.experiment.seeds = 1;
    cfg.experiment.demo_counts = vec![2, 4];
    cfg.experiment.probe_demos = Some(2);
    cfg.experiment.state_scenes = 10;
    cfg.experiment.probe_scenes = 5;
    cfg.experiment.train_steps = Some(60);
    cfg.eval.episodes_per_task = 5;
    cfg.eval.repeats = 2;
    let report = run_experiment(ExperimentKind::DataScale, &cfg, &out)?;
    print!("{}", report.to_text());
    println!("\n{} artifacts under {}", report.artifacts.len(), out.display());
    Ok(())
}
