//! Extracts keyframes from a scripted demonstration and compares them with its waypoints.

use rosa::collect::{script_expert, ExpertConfig};
use rosa::common::derive_stream;
use rosa::keyframe::{extract, KeyframeConfig, TrajectoryPoint};
use rosa::sim::{default_tasks, SimConfig};

fn main() -> rosa::Result<()> {
    let sim = SimConfig::default();
    let task = &default_tasks()[1];
    let demo = script_expert(task, &sim, &ExpertConfig::default(), derive_stream(3, 0))?;
    let points: Vec<TrajectoryPoint> = demo
        .frames
        .iter()
        .map(|f| TrajectoryPoint {
            position: f.state.position(),
            gripper: f.state.gripper,
        })
        .collect();
    let keys = extract(&points, &KeyframeConfig::default())?;
    println!("{} frames, keyframes {keys:?}", points.len());
    for (i, k) in keys.iter().enumerate() {
        let s = demo.frames[*k].state;
        println!("  #{i} frame {k:4}  pos ({:+.3}, {:.3}, {:.3})  {:?}", s.x, s.y, s.z, s.gripper);
    }
    println!("waypoints:");
    for w in &demo.waypoints {
        println!("  pos ({:+.3}, {:.3}, {:.3})  {:?}", w.x, w.y, w.z, w.gripper);
    }
    Ok(())
}
