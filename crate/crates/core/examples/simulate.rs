//! Resets a task, drives the scripted waypoints through the simulator and writes PGM frames.
//!
//! Usage: `cargo run --example simulate -- [out_dir]`

use std::path::PathBuf;

use rosa::collect::{expert_waypoints, ExpertConfig};
use rosa::common::derive_stream;
use rosa::sim::{default_tasks, render, reset, step, success, SimConfig};

fn main() -> rosa::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/simulate".into()));
    std::fs::create_dir_all(&out).expect("create output dir");
    let sim = SimConfig::default();
    let task = &default_tasks()[0];
    let mut scene = reset(task, &sim, derive_stream(7, 0))?;
    let waypoints = expert_waypoints(&scene, task, &ExpertConfig::default())?;
    let mut frames = vec![render(&scene, &sim)];
    for wp in &waypoints {
        let (next, traj) = step(&scene, wp, 200, &sim);
        frames.extend(traj.frames.into_iter().map(|f| f.observation));
        scene = next;
    }
    for (i, f) in frames.iter().enumerate() {
        std::fs::write(out.join(format!("frame_{i:04}.pgm")), f.to_pgm()).expect("write frame");
    }
    println!("{}: {} frames, success = {}", task.name, frames.len(), success(&scene, task));
    println!("frames written to {}", out.display());
    Ok(())
}
