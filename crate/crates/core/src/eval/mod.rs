//! Closed-loop evaluation, linear probing and the comparison experiments.

mod experiment;
mod probe;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collect::{expert_waypoints, ExpertConfig};
use crate::common::{clamp_to_workspace, derive_stream, ActionState, RngStream};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sim::{self, Observation, Scene, SimConfig, TaskSpec};

pub use experiment::{
    run_experiment, Aggregate, CellReport, ExperimentConfig, ExperimentKind, ExperimentReport, ProbeRow, SceneCell, Table,
};
pub use probe::{fit_ridge, linear_probe, linear_probe_records, probe_features, ProbeConfig, ProbeReport, RidgeFit};

/// What a policy sees at one decision point.
pub struct PolicyInput<'a> {
    pub observation: &'a Observation,
    pub instruction: &'a str,
    /// Current simulator state; only privileged policies (the expert) look at it.
    pub scene: &'a Scene,
    pub initial: &'a Scene,
    pub task: &'a TaskSpec,
    pub keyframe: usize,
}

pub trait Policy: Sync {
    fn act(&self, input: &PolicyInput) -> Result<ActionState>;
}

impl Policy for Model<f32> {
    fn act(&self, input: &PolicyInput) -> Result<ActionState> {
        let ids = self.tokenizer.encode_text(input.instruction)?;
        self.generate(input.observation, &ids)
    }
}

/// Replays the scripted waypoints computed from the initial scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertPolicy(pub ExpertConfig);

impl Policy for ExpertPolicy {
    fn act(&self, input: &PolicyInput) -> Result<ActionState> {
        let wps = expert_waypoints(input.initial, input.task, &self.0)?;
        Ok(wps[input.keyframe.min(wps.len() - 1)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub repeats: usize,
    pub max_keyframes: usize,
    /// Substep budget for each commanded keyframe.
    pub max_substeps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_task: 25,
            repeats: 3,
            max_keyframes: 8,
            max_substeps: 200,
            seed: 1_000_003,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_task == 0 || self.repeats == 0 || self.max_keyframes == 0 || self.max_substeps == 0 {
            return Err(Error::invalid(
                "eval config: episodes_per_task, repeats, max_keyframes and max_substeps must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub robot: ActionState,
    pub attached: Option<String>,
    pub item: Option<[f64; 3]>,
    pub container: Option<[f64; 3]>,
}

impl SceneSummary {
    fn of(scene: &Scene, task: &TaskSpec) -> Self {
        SceneSummary {
            robot: scene.robot,
            attached: scene.attached.clone(),
            item: scene.object(&task.item.id).map(|o| o.position),
            container: scene.object(&task.container.id).map(|o| o.position),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub keyframes: usize,
    pub final_scene: Option<SceneSummary>,
    pub error: Option<String>,
}

/// Stream for one episode, keyed by task name so results do not depend on task order.
pub fn episode_stream(base_seed: u64, task: &str, repeat: usize, episode: usize) -> RngStream {
    let digest = Sha256::digest(task.as_bytes());
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    derive_stream(base_seed, key).child(repeat as u64).child(episode as u64)
}

fn run_episode(
    policy: &dyn Policy,
    task: &TaskSpec,
    sim_cfg: &SimConfig,
    stream: RngStream,
    cfg: &EvalConfig,
    mut frames: Option<&mut Vec<Observation>>,
) -> EpisodeResult {
    let mut result = EpisodeResult {
        task: task.name.clone(),
        seed: stream.fingerprint(),
        success: false,
        keyframes: 0,
        final_scene: None,
        error: None,
    };
    let initial = match sim::reset(task, sim_cfg, stream) {
        Ok(s) => s,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let mut scene = initial.clone();
    if let Some(f) = frames.as_deref_mut() {
        f.push(sim::render(&scene, sim_cfg));
    }
    for k in 0..cfg.max_keyframes {
        let obs = sim::render(&scene, sim_cfg);
        let input = PolicyInput {
            observation: &obs,
            instruction: &task.instruction,
            scene: &scene,
            initial: &initial,
            task,
            keyframe: k,
        };
        let action = match policy.act(&input) {
            Ok(a) => clamp_to_workspace(a, &sim_cfg.workspace),
            Err(e) => {
                result.error = Some(e.to_string());
                break;
            }
        };
        let (next, traj) = sim::step(&scene, &action, cfg.max_substeps, sim_cfg);
        if let Some(f) = frames.as_deref_mut() {
            f.extend(traj.frames.into_iter().map(|fr| fr.observation));
        }
        scene = next;
        result.keyframes = k + 1;
        if sim::success(&scene, task) {
            result.success = true;
            break;
        }
    }
    result.final_scene = Some(SceneSummary::of(&scene, task));
    result
}

/// One closed-loop episode: render, act, clamp, step, until success or `max_keyframes`.
pub fn rollout(policy: &dyn Policy, task: &TaskSpec, sim_cfg: &SimConfig, stream: RngStream, cfg: &EvalConfig) -> EpisodeResult {
    run_episode(policy, task, sim_cfg, stream, cfg, None)
}

/// As [`rollout`], also returning every rendered frame in order.
pub fn rollout_frames(
    policy: &dyn Policy,
    task: &TaskSpec,
    sim_cfg: &SimConfig,
    stream: RngStream,
    cfg: &EvalConfig,
) -> (EpisodeResult, Vec<Observation>) {
    let mut frames = Vec::new();
    let r = run_episode(policy, task, sim_cfg, stream, cfg, Some(&mut frames));
    (r, frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRate {
    pub task: String,
    /// Success fraction of each repeat.
    pub per_repeat: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub successes: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub tasks: Vec<TaskRate>,
    /// Mean and std over repeats of the task-averaged success fraction.
    pub mean: f64,
    pub std: f64,
    pub successes: usize,
    pub episodes: usize,
}

impl SuccessReport {
    pub fn task(&self, name: &str) -> Option<&TaskRate> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Formats fractions as percentages, e.g. `63.7 ± 0.6`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

pub fn success_rate(
    policy: &dyn Policy,
    tasks: &[TaskSpec],
    sim_cfg: &SimConfig,
    cfg: &EvalConfig,
) -> Result<SuccessReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("success_rate needs at least one task"));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..cfg.repeats).flat_map(move |r| (0..cfg.episodes_per_task).map(move |e| (t, r, e))))
        .collect();
    let results: Vec<bool> = jobs
        .par_iter()
        .map(|&(t, r, e)| {
            let stream = episode_stream(cfg.seed, &tasks[t].name, r, e);
            rollout(policy, &tasks[t], sim_cfg, stream, cfg).success
        })
        .collect();
    let per = cfg.episodes_per_task;
    let mut rates = Vec::with_capacity(tasks.len());
    let mut repeat_avgs = vec![0.0; cfg.repeats];
    for (t, task) in tasks.iter().enumerate() {
        let per_repeat: Vec<f64> = (0..cfg.repeats)
            .map(|r| {
                let base = (t * cfg.repeats + r) * per;
                results[base..base + per].iter().filter(|&&s| s).count() as f64 / per as f64
            })
            .collect();
        for (acc, v) in repeat_avgs.iter_mut().zip(&per_repeat) {
            *acc += v / tasks.len() as f64;
        }
        let (mean, std) = mean_std(&per_repeat);
        let successes = results[t * cfg.repeats * per..(t + 1) * cfg.repeats * per]
            .iter()
            .filter(|&&s| s)
            .count();
        rates.push(TaskRate {
            task: task.name.clone(),
            per_repeat,
            mean,
            std,
            successes,
            episodes: cfg.repeats * per,
        });
    }
    let (mean, std) = mean_std(&repeat_avgs);
    Ok(SuccessReport {
        successes: rates.iter().map(|r| r.successes).sum(),
        episodes: rates.iter().map(|r| r.episodes).sum(),
        tasks: rates,
        mean,
        std,
    })
}
