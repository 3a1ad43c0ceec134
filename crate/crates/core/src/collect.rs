//! The two data sources: scripted expert demonstrations and random-motion state samples.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{horizontal_distance, ActionState, Gripper, Range, RngStream};
use crate::error::{Error, Result};
use crate::sim::{
    self, ObjectKind, ObjectTemplate, Observation, Scene, SimConfig, TaskSpec,
};
use crate::tokenizer::STATE_INSTRUCTION;

/// Retries granted to the expert before giving up on a task.
pub const EXPERT_ATTEMPTS: usize = 10;
/// Frames the expert holds still at transit waypoints so they read as pauses.
pub const DWELL_FRAMES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub hover_z: f64,
    pub max_substeps: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            hover_z: 0.15,
            max_substeps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    pub observation: Observation,
    /// Measured pose at render time.
    pub state: ActionState,
    /// The waypoint the expert is heading to next.
    pub action: ActionState,
    pub timestep: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: String,
    pub instruction: String,
    pub frames: Vec<DemoFrame>,
    pub seed: u64,
    pub initial_scene: Scene,
    pub waypoints: Vec<ActionState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    pub observation: Observation,
    pub state: ActionState,
    pub instruction: String,
    pub scene_index: usize,
    pub seed: u64,
    pub task: Option<String>,
}

/// The six-waypoint pick-and-place script for the current scene.
pub fn expert_waypoints(scene: &Scene, task: &TaskSpec, cfg: &ExpertConfig) -> Result<[ActionState; 6]> {
    let item = scene
        .object(&task.item.id)
        .ok_or_else(|| Error::invalid(format!("scene lacks item `{}`", task.item.id)))?;
    let container = scene
        .object(&task.container.id)
        .ok_or_else(|| Error::invalid(format!("scene lacks container `{}`", task.container.id)))?;
    let base = scene.robot;
    let [ix, iy, iz] = item.position;
    let [cx, cy, _] = container.position;
    let at = |x, y, z, g| base.with_position([x, y, z]).with_gripper(g);
    Ok([
        at(ix, iy, cfg.hover_z, Gripper::Open),
        at(ix, iy, iz, Gripper::Open),
        at(ix, iy, iz, Gripper::Closed),
        at(ix, iy, cfg.hover_z, Gripper::Closed),
        at(cx, cy, cfg.hover_z, Gripper::Closed),
        at(cx, cy, cfg.hover_z, Gripper::Open),
    ])
}

/// Waypoints followed by motion (not a gripper change) get a short dwell.
fn dwells_after(index: usize) -> bool {
    matches!(index, 0 | 3)
}

pub fn script_expert(
    task: &TaskSpec,
    sim_cfg: &SimConfig,
    expert: &ExpertConfig,
    rng: RngStream,
) -> Result<Demonstration> {
    for attempt in 0..EXPERT_ATTEMPTS {
        let stream = if attempt == 0 { rng } else { rng.child(attempt as u64) };
        let scene = sim::reset(task, sim_cfg, stream)?;
        if let Some(demo) = run_script(task, sim_cfg, expert, scene, stream)? {
            return Ok(demo);
        }
    }
    Err(Error::ScriptFailure {
        task: task.name.clone(),
        attempts: EXPERT_ATTEMPTS,
    })
}

fn run_script(
    task: &TaskSpec,
    sim_cfg: &SimConfig,
    expert: &ExpertConfig,
    initial: Scene,
    stream: RngStream,
) -> Result<Option<Demonstration>> {
    let waypoints = expert_waypoints(&initial, task, expert)?;
    let mut scene = initial.clone();
    let mut frames = vec![DemoFrame {
        observation: sim::render(&scene, sim_cfg),
        state: scene.robot,
        action: waypoints[0],
        timestep: scene.time,
    }];
    for (k, wp) in waypoints.iter().enumerate() {
        let next = waypoints.get(k + 1).copied().unwrap_or(*wp);
        let (s, traj) = sim::step(&scene, wp, expert.max_substeps, sim_cfg);
        if !traj.complete {
            return Ok(None);
        }
        scene = s;
        let last = traj.frames.len() - 1;
        for (j, f) in traj.frames.into_iter().enumerate() {
            frames.push(DemoFrame {
                timestep: f.observation.timestep,
                observation: f.observation,
                state: f.state,
                action: if j == last { next } else { *wp },
            });
        }
        if dwells_after(k) {
            for _ in 0..DWELL_FRAMES {
                let (s, traj) = sim::step(&scene, wp, 1, sim_cfg);
                scene = s;
                for f in traj.frames {
                    frames.push(DemoFrame {
                        timestep: f.observation.timestep,
                        observation: f.observation,
                        state: f.state,
                        action: next,
                    });
                }
            }
        }
    }
    if !sim::success(&scene, task) {
        return Ok(None);
    }
    Ok(Some(Demonstration {
        task: task.name.clone(),
        instruction: task.instruction.clone(),
        frames,
        seed: stream.fingerprint(),
        initial_scene: initial,
        waypoints: waypoints.to_vec(),
    }))
}

/// Collects `per_task` demonstrations for every task, task-major.
pub fn collect_demos(
    tasks: &[TaskSpec],
    per_task: usize,
    sim_cfg: &SimConfig,
    expert: &ExpertConfig,
    rng: RngStream,
) -> Result<Vec<Demonstration>> {
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..per_task).map(move |d| (t, d)))
        .collect();
    jobs.par_iter()
        .map(|&(t, d)| {
            let s = rng.child(t as u64).child(d as u64);
            script_expert(&tasks[t], sim_cfg, expert, s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneType {
    /// The evaluation task layouts.
    Relevant,
    /// Layouts without any task item or container.
    Irrelevant,
}

impl std::str::FromStr for SceneType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevant" => Ok(SceneType::Relevant),
            "irrelevant" => Ok(SceneType::Irrelevant),
            other => Err(Error::invalid(format!(
                "scene type must be relevant or irrelevant, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateCollectConfig {
    pub gripper_toggle_prob: f64,
    /// Clearance kept above object tops (and around their footprint), meters.
    pub z_margin: f64,
    /// Substeps between recorded samples.
    pub stride: usize,
    pub max_substeps: usize,
    /// Objects used for irrelevant scenes.
    pub clutter: Vec<ObjectTemplate>,
}

impl Default for StateCollectConfig {
    fn default() -> Self {
        StateCollectConfig {
            gripper_toggle_prob: 0.1,
            z_margin: 0.02,
            stride: 3,
            max_substeps: 200,
            clutter: vec![
                ObjectTemplate {
                    id: "clutter_a".into(),
                    radius: 0.04,
                    intensity: 90,
                },
                ObjectTemplate {
                    id: "clutter_b".into(),
                    radius: 0.05,
                    intensity: 140,
                },
            ],
        }
    }
}

const TARGET_ATTEMPTS: usize = 100;

/// True when the straight segment `a -> b` stays clear of every object's keep-out cylinder.
fn segment_clear(scene: &Scene, a: [f64; 3], b: [f64; 3], margin: f64) -> bool {
    let len = crate::common::distance(a, b);
    let n = (len / 0.005).ceil().max(1.0) as usize;
    (0..=n).all(|k| {
        let t = k as f64 / n as f64;
        let p = [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ];
        scene.objects.iter().all(|o| {
            horizontal_distance(p, o.position) >= o.radius + margin
                || p[2] >= o.position[2] + o.radius + margin
        })
    })
}

fn random_target(
    scene: &Scene,
    rng: &mut impl Rng,
    sim_cfg: &SimConfig,
    cfg: &StateCollectConfig,
) -> ActionState {
    let safe = sim_cfg.workspace.safe();
    let cur = scene.robot;
    let gripper = if rng.random_bool(cfg.gripper_toggle_prob) {
        match cur.gripper {
            Gripper::Open => Gripper::Closed,
            Gripper::Closed => Gripper::Open,
        }
    } else {
        cur.gripper
    };
    for _ in 0..TARGET_ATTEMPTS {
        let p = safe.map(|r: Range| rng.random_range(r.min..=r.max));
        if segment_clear(scene, cur.position(), p, cfg.z_margin) {
            let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let mut t = cur.with_position(p).with_gripper(gripper);
            t.psi = psi;
            return t;
        }
    }
    // straight up always leaves the keep-out volume
    cur.with_position([cur.x, cur.y, safe[2].max]).with_gripper(gripper)
}

fn state_scene(
    scene_type: SceneType,
    tasks: &[TaskSpec],
    index: usize,
    sim_cfg: &SimConfig,
    cfg: &StateCollectConfig,
    stream: RngStream,
) -> Result<(Scene, Option<String>)> {
    let task = &tasks[index % tasks.len()];
    match scene_type {
        SceneType::Relevant => Ok((sim::reset(task, sim_cfg, stream)?, Some(task.name.clone()))),
        SceneType::Irrelevant => {
            let templates: Vec<_> = cfg
                .clutter
                .iter()
                .map(|t| (ObjectKind::Distractor, t.clone()))
                .collect();
            Ok((sim::place_objects(&templates, &task.placement, sim_cfg, stream)?, None))
        }
    }
}

/// Random-motion robot state samples, `steps_per_scene` from each of `n_scenes` scenes.
pub fn collect_states(
    scene_type: SceneType,
    tasks: &[TaskSpec],
    n_scenes: usize,
    steps_per_scene: usize,
    sim_cfg: &SimConfig,
    cfg: &StateCollectConfig,
    rng: RngStream,
) -> Result<Vec<StateSample>> {
    if n_scenes == 0 {
        return Err(Error::invalid("collect_states needs n_scenes >= 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("collect_states needs at least one task layout"));
    }
    let per_scene: Vec<Vec<StateSample>> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let stream = rng.child(i as u64);
            let (mut scene, task) = state_scene(scene_type, tasks, i, sim_cfg, cfg, stream)?;
            let mut r = stream.child(u64::MAX).rng();
            let mut out = Vec::with_capacity(steps_per_scene);
            let mut since = 0usize;
            while out.len() < steps_per_scene {
                let target = random_target(&scene, &mut r, sim_cfg, cfg);
                let (s, traj) = sim::step(&scene, &target, cfg.max_substeps, sim_cfg);
                scene = s;
                for f in traj.frames {
                    since += 1;
                    if since >= cfg.stride.max(1) && out.len() < steps_per_scene {
                        since = 0;
                        out.push(StateSample {
                            observation: f.observation,
                            state: f.state,
                            instruction: STATE_INSTRUCTION.to_string(),
                            scene_index: i,
                            seed: stream.fingerprint(),
                            task: task.clone(),
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}
