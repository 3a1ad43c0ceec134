//! Baseline-versus-mixed comparison grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{linear_probe, mean_std, success_rate, ProbeReport, SuccessReport};
use crate::collect::{collect_demos, collect_states, SceneType, StateSample};
use crate::common::{derive_stream, RngStream};
use crate::config::RunConfig;
use crate::dataset::{
    build_action_samples, build_state_samples, state_count, write_json, Corpus, CorpusMeta, MixConfig, Provenance,
    SampleRecord,
};
use crate::error::{Error, Result};
use crate::model::{sha256_hex, train, Model, TrainConfig, TrainOutcome};
use crate::sim::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DataScale,
    OneShot,
    RatioSweep,
    SceneSweep,
    Generalization,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::DataScale,
        ExperimentKind::OneShot,
        ExperimentKind::RatioSweep,
        ExperimentKind::SceneSweep,
        ExperimentKind::Generalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DataScale => "data_scale",
            ExperimentKind::OneShot => "one_shot",
            ExperimentKind::RatioSweep => "ratio_sweep",
            ExperimentKind::SceneSweep => "scene_sweep",
            ExperimentKind::Generalization => "generalization",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCell {
    pub scene_type: SceneType,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Independent repetitions; each gets its own demos, state corpus and initialization.
    pub seeds: usize,
    /// Demos per task for the data-scale grid.
    pub demo_counts: Vec<usize>,
    pub one_shot_demos: usize,
    /// Demos per task for the ratio, scene and generalization studies.
    pub sweep_demos: usize,
    pub ratios: Vec<f64>,
    pub scene_cells: Vec<SceneCell>,
    /// Relevant-scene state corpus shared by all studies except the scene sweep.
    pub state_scenes: usize,
    pub state_steps_per_scene: usize,
    /// When set, every cell trains for about this many optimizer steps instead of `train.epochs`.
    pub train_steps: Option<usize>,
    /// Probe the data-scale checkpoints (and a random-init model) at this demo count.
    pub probe_demos: Option<usize>,
    pub probe_scenes: usize,
    pub probe_steps_per_scene: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: 3,
            demo_counts: vec![1, 5, 10, 25],
            one_shot_demos: 1,
            sweep_demos: 10,
            ratios: vec![0.0, 0.125, 0.25, 0.5],
            scene_cells: vec![
                SceneCell {
                    scene_type: SceneType::Relevant,
                    scenes: 20,
                },
                SceneCell {
                    scene_type: SceneType::Relevant,
                    scenes: 100,
                },
                SceneCell {
                    scene_type: SceneType::Irrelevant,
                    scenes: 20,
                },
                SceneCell {
                    scene_type: SceneType::Irrelevant,
                    scenes: 100,
                },
            ],
            state_scenes: 100,
            state_steps_per_scene: 30,
            train_steps: None,
            probe_demos: Some(10),
            probe_scenes: 100,
            probe_steps_per_scene: 30,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.one_shot_demos == 0 || self.sweep_demos == 0 {
            return Err(Error::invalid("seeds, one_shot_demos and sweep_demos must be >= 1"));
        }
        if self.demo_counts.is_empty() || self.demo_counts.contains(&0) {
            return Err(Error::invalid("demo_counts must be nonempty and positive"));
        }
        if self.ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid("ratios must be finite and >= 0"));
        }
        if self.scene_cells.iter().any(|c| c.scenes == 0) || self.state_scenes == 0 || self.probe_scenes == 0 {
            return Err(Error::invalid("scene counts must be >= 1"));
        }
        if self.state_steps_per_scene == 0 || self.probe_steps_per_scene == 0 || self.train_steps == Some(0) {
            return Err(Error::invalid("steps per scene and train_steps must be >= 1"));
        }
        if let Some(n) = self.probe_demos {
            if !self.demo_counts.contains(&n) {
                return Err(Error::invalid(format!("probe_demos {n} is not one of demo_counts")));
            }
        }
        Ok(())
    }
}

/// One trained policy and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// Table row this cell belongs to.
    pub row: String,
    /// `baseline` or `rosa`.
    pub policy: String,
    pub seed_index: usize,
    pub demos_per_task: usize,
    pub ratio: f64,
    pub scene: SceneCell,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
    pub success: Option<SuccessReport>,
    pub probe: Option<ProbeReport>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

/// Seed-aggregated success of one (row, policy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub row: String,
    pub policy: String,
    /// Task-averaged success rate of each seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub successes: usize,
    pub episodes: usize,
    /// Successes per task summed over seeds.
    pub task_successes: BTreeMap<String, usize>,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub seed_index: usize,
    pub random_init: Option<ProbeReport>,
    pub baseline: Option<ProbeReport>,
    pub rosa: Option<ProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let pad = w - c.chars().count();
                if i == 0 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<Aggregate>,
    pub probe: Vec<ProbeRow>,
    pub table: Table,
    pub probe_table: Option<Table>,
    /// Relative artifact path to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn aggregate(&self, row: &str, policy: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.row == row && a.policy == policy)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("experiment {} (seed {})\n\n", self.kind.name(), self.seed);
        s.push_str(&self.table.render());
        if let Some(p) = &self.probe_table {
            s.push('\n');
            s.push_str(&p.render());
        }
        let failed: Vec<&CellReport> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            s.push_str("\nfailed cells:\n");
            for c in failed {
                let _ = writeln!(
                    s,
                    "  {} {} seed {}: {}",
                    c.row,
                    c.policy,
                    c.seed_index,
                    c.error.as_deref().unwrap_or("")
                );
            }
        }
        s
    }
}

struct CellSpec {
    row: String,
    policy: &'static str,
    seed_index: usize,
    demos: usize,
    ratio: f64,
    scene: SceneCell,
    eval_tasks: bool,
}

/// Per-seed data shared by every cell of that seed.
struct SeedData {
    seed: u64,
    /// Action records of the largest demo set; `demo_id = task * max_demos + d`.
    actions: Vec<SampleRecord>,
    max_demos: usize,
    states: BTreeMap<(SceneType, usize), Vec<SampleRecord>>,
    probe: Vec<StateSample>,
}

impl SeedData {
    fn actions_for(&self, demos: usize) -> Vec<SampleRecord> {
        self.actions
            .iter()
            .filter(|r| (r.demo_id as usize) % self.max_demos < demos)
            .cloned()
            .collect()
    }
}

fn seed_value(master: u64, i: usize) -> u64 {
    derive_stream(master, i as u64).fingerprint()
}

fn label_ratio(r: f64) -> String {
    format!("{r}")
}

fn relevant(scenes: usize) -> SceneCell {
    SceneCell {
        scene_type: SceneType::Relevant,
        scenes,
    }
}

fn plan(kind: ExperimentKind, cfg: &RunConfig) -> Vec<CellSpec> {
    let x = &cfg.experiment;
    let rosa = cfg.mix.state_ratio;
    let shared = relevant(x.state_scenes);
    let mut cells = Vec::new();
    for s in 0..x.seeds {
        let mut pair = |row: String, demos: usize, ratio: f64, scene: SceneCell, eval_tasks: bool| {
            cells.push(CellSpec {
                row: row.clone(),
                policy: "baseline",
                seed_index: s,
                demos,
                ratio: 0.0,
                scene,
                eval_tasks,
            });
            cells.push(CellSpec {
                row,
                policy: "rosa",
                seed_index: s,
                demos,
                ratio,
                scene,
                eval_tasks,
            });
        };
        match kind {
            ExperimentKind::DataScale => {
                for &n in &x.demo_counts {
                    pair(n.to_string(), n, rosa, shared, true);
                }
            }
            ExperimentKind::OneShot => pair(x.one_shot_demos.to_string(), x.one_shot_demos, rosa, shared, true),
            ExperimentKind::Generalization => pair(x.sweep_demos.to_string(), x.sweep_demos, rosa, shared, false),
            ExperimentKind::RatioSweep => {
                for &r in &x.ratios {
                    cells.push(CellSpec {
                        row: label_ratio(r),
                        policy: if r == 0.0 { "baseline" } else { "rosa" },
                        seed_index: s,
                        demos: x.sweep_demos,
                        ratio: r,
                        scene: shared,
                        eval_tasks: true,
                    });
                }
            }
            ExperimentKind::SceneSweep => {
                cells.push(CellSpec {
                    row: "none".into(),
                    policy: "baseline",
                    seed_index: s,
                    demos: x.sweep_demos,
                    ratio: 0.0,
                    scene: shared,
                    eval_tasks: true,
                });
                for &sc in &x.scene_cells {
                    let name = match sc.scene_type {
                        SceneType::Relevant => "relevant",
                        SceneType::Irrelevant => "irrelevant",
                    };
                    cells.push(CellSpec {
                        row: format!("{name} x{}", sc.scenes),
                        policy: "rosa",
                        seed_index: s,
                        demos: x.sweep_demos,
                        ratio: rosa,
                        scene: sc,
                        eval_tasks: true,
                    });
                }
            }
        }
    }
    cells
}

fn prepare_seed(cfg: &RunConfig, index: usize, cells: &[&CellSpec], probe: bool) -> Result<SeedData> {
    let x = &cfg.experiment;
    let seed = seed_value(cfg.seed, index);
    let root = derive_stream(seed, 0);
    let max_demos = cells.iter().map(|c| c.demos).max().unwrap_or(1);
    let demos = collect_demos(&cfg.tasks, max_demos, &cfg.sim, &cfg.expert, root.child(0))?;
    let actions = build_action_samples(&demos, &cfg.keyframe, &cfg.tokenizer)?;
    let mut states = BTreeMap::new();
    for c in cells.iter().filter(|c| c.ratio > 0.0) {
        let key = (c.scene.scene_type, c.scene.scenes);
        if states.contains_key(&key) {
            continue;
        }
        let stream = state_stream(root, c.scene);
        let samples = collect_states(
            c.scene.scene_type,
            &cfg.tasks,
            c.scene.scenes,
            x.state_steps_per_scene,
            &cfg.sim,
            &cfg.state_collect,
            stream,
        )?;
        states.insert(key, build_state_samples(&samples, &cfg.tokenizer)?);
    }
    let probe = if probe {
        collect_states(
            SceneType::Relevant,
            &cfg.tasks,
            x.probe_scenes,
            x.probe_steps_per_scene,
            &cfg.sim,
            &cfg.state_collect,
            root.child(2),
        )?
    } else {
        Vec::new()
    };
    Ok(SeedData {
        seed,
        actions,
        max_demos,
        states,
        probe,
    })
}

fn state_stream(root: RngStream, scene: SceneCell) -> RngStream {
    let kind = match scene.scene_type {
        SceneType::Relevant => 0,
        SceneType::Irrelevant => 1,
    };
    root.child(1).child(kind).child(scene.scenes as u64)
}

fn train_config(cfg: &RunConfig, seed: u64, epoch_len: usize) -> TrainConfig {
    let mut t = cfg.train;
    t.seed = seed;
    if let Some(steps) = cfg.experiment.train_steps {
        t.epochs = steps.div_ceil(t.steps_per_epoch(epoch_len)).max(1);
        let total = t.epochs * t.steps_per_epoch(epoch_len);
        t.warmup_steps = t.warmup_steps.min(total);
    }
    t
}

struct CellOutcome {
    report: CellReport,
    files: Vec<(String, Vec<u8>)>,
}

fn run_cell(cfg: &RunConfig, spec: &CellSpec, data: &SeedData, probe: bool) -> Result<CellOutcome> {
    let actions = data.actions_for(spec.demos);
    let empty = Vec::new();
    let states = if spec.ratio > 0.0 {
        &data.states[&(spec.scene.scene_type, spec.scene.scenes)]
    } else {
        &empty
    };
    let mix = MixConfig {
        state_ratio: spec.ratio,
        seed: data.seed,
    };
    let epoch_len = actions.len() + state_count(actions.len(), spec.ratio);
    let tcfg = train_config(cfg, data.seed, epoch_len);
    let TrainOutcome { checkpoint, steps, .. } =
        train(&cfg.model, &tcfg, &cfg.tokenizer, &cfg.image(), &actions, states, &mix)?;
    let tasks: &[TaskSpec] = if spec.eval_tasks { &cfg.tasks } else { &cfg.generalization_tasks };
    let success = success_rate(&checkpoint.model, tasks, &cfg.sim, &cfg.eval)?;
    let probe = if probe {
        Some(linear_probe(&checkpoint.model, &data.probe, &cfg.probe)?)
    } else {
        None
    };
    let bytes = checkpoint.to_bytes();
    let mut metrics = String::new();
    for s in &steps {
        metrics.push_str(&serde_json::to_string(s).expect("metrics serialize"));
        metrics.push('\n');
    }
    let dir = cell_dir(spec);
    Ok(CellOutcome {
        report: CellReport {
            row: spec.row.clone(),
            policy: spec.policy.to_string(),
            seed_index: spec.seed_index,
            demos_per_task: spec.demos,
            ratio: spec.ratio,
            scene: spec.scene,
            train_steps: steps.len(),
            final_loss: steps.last().map(|s| s.loss),
            success: Some(success),
            probe,
            checkpoint: Some(sha256_hex(&bytes)),
            error: None,
        },
        files: vec![
            (format!("{dir}/model.ckpt"), bytes),
            (format!("{dir}/metrics.jsonl"), metrics.into_bytes()),
        ],
    })
}

fn cell_dir(spec: &CellSpec) -> String {
    let row: String = spec
        .row
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    format!("seed{}/cells/{}_{}", spec.seed_index, row, spec.policy)
}

fn write_artifact(out: &Path, rel: &str, bytes: &[u8], artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    artifacts.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn write_corpus(out: &Path, rel: &str, corpus: &Corpus, artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    let dir = out.join(rel);
    corpus.write(&dir)?;
    for f in ["meta.json", "actions.jsonl", "states.jsonl"] {
        let p = dir.join(f);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        artifacts.insert(format!("{rel}/{f}"), sha256_hex(&bytes));
    }
    Ok(())
}

fn corpus(cfg: &RunConfig, source: &str, seed: u64, actions: Vec<SampleRecord>, states: Vec<SampleRecord>) -> Corpus {
    Corpus {
        meta: CorpusMeta {
            tokenizer: cfg.tokenizer.clone(),
            workspace: cfg.sim.workspace,
            image: cfg.image(),
            actions: actions.len(),
            states: states.len(),
            provenance: Provenance {
                source: source.to_string(),
                seed,
                tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
                detail: serde_json::Value::Null,
            },
        },
        actions,
        states,
    }
}

fn aggregate(cells: &[CellReport]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let k = (c.row.clone(), c.policy.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(row, policy)| {
            let group: Vec<&CellReport> = cells.iter().filter(|c| c.row == row && c.policy == policy).collect();
            let ok: Vec<&SuccessReport> = group.iter().filter_map(|c| c.success.as_ref()).collect();
            let per_seed: Vec<f64> = ok.iter().map(|r| r.mean).collect();
            let (mean, std) = mean_std(&per_seed);
            let mut task_successes = BTreeMap::new();
            for r in &ok {
                for t in &r.tasks {
                    *task_successes.entry(t.task.clone()).or_insert(0) += t.successes;
                }
            }
            Aggregate {
                failed_cells: group.len() - ok.len(),
                successes: ok.iter().map(|r| r.successes).sum(),
                episodes: ok.iter().map(|r| r.episodes).sum(),
                row,
                policy,
                per_seed,
                mean,
                std,
                task_successes,
            }
        })
        .collect()
}

fn pm(a: Option<&Aggregate>) -> String {
    match a {
        Some(a) if !a.per_seed.is_empty() => super::format_pm(a.mean, a.std),
        _ => "n/a".into(),
    }
}

fn delta(a: Option<&Aggregate>, b: Option<&Aggregate>) -> String {
    match (a, b) {
        (Some(a), Some(b)) if !a.per_seed.is_empty() && !b.per_seed.is_empty() => {
            format!("{:+.1}", 100.0 * (b.mean - a.mean))
        }
        _ => "n/a".into(),
    }
}

fn rows_in_order(cells: &[CellReport]) -> Vec<String> {
    let mut rows: Vec<String> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row) {
            rows.push(c.row.clone());
        }
    }
    rows
}

fn build_table(kind: ExperimentKind, aggs: &[Aggregate], cells: &[CellReport]) -> Table {
    let find = |row: &str, policy: &str| aggs.iter().find(|a| a.row == row && a.policy == policy);
    let rows = rows_in_order(cells);
    match kind {
        ExperimentKind::DataScale | ExperimentKind::Generalization => {
            let first = if kind == ExperimentKind::DataScale { "demos/task" } else { "demos/task (unseen tasks)" };
            Table {
                columns: vec![first.into(), "baseline SR".into(), "ROSA SR".into(), "delta".into()],
                rows: rows
                    .iter()
                    .map(|r| vec![r.clone(), pm(find(r, "baseline")), pm(find(r, "rosa")), delta(find(r, "baseline"), find(r, "rosa"))])
                    .collect(),
            }
        }
        ExperimentKind::OneShot => {
            let row = &rows[0];
            let (b, r) = (find(row, "baseline"), find(row, "rosa"));
            let mut names: Vec<String> = Vec::new();
            for a in [b, r].into_iter().flatten() {
                for k in a.task_successes.keys() {
                    if !names.contains(k) {
                        names.push(k.clone());
                    }
                }
            }
            let count = |a: Option<&Aggregate>, t: &str| {
                a.and_then(|a| a.task_successes.get(t)).map_or("n/a".into(), |v| v.to_string())
            };
            let mut table_rows: Vec<Vec<String>> =
                names.iter().map(|t| vec![t.clone(), count(b, t), count(r, t)]).collect();
            let total = |a: Option<&Aggregate>| a.map_or("n/a".into(), |a| format!("{}/{}", a.successes, a.episodes));
            table_rows.push(vec!["total".into(), total(b), total(r)]);
            table_rows.push(vec!["SR".into(), pm(b), pm(r)]);
            Table {
                columns: vec!["task".into(), "baseline successes".into(), "ROSA successes".into()],
                rows: table_rows,
            }
        }
        ExperimentKind::RatioSweep | ExperimentKind::SceneSweep => {
            let base_row = &rows[0];
            let base = find(base_row, "baseline");
            let first = if kind == ExperimentKind::RatioSweep { "ratio" } else { "state scenes" };
            Table {
                columns: vec![first.into(), "SR".into(), "delta vs baseline".into()],
                rows: rows
                    .iter()
                    .map(|r| {
                        let a = find(r, "rosa").or_else(|| find(r, "baseline"));
                        let d = if r == base_row { "".into() } else { delta(base, a) };
                        vec![r.clone(), pm(a), d]
                    })
                    .collect(),
            }
        }
    }
}

fn probe_table(rows: &[ProbeRow]) -> Table {
    let acc = |p: &Option<ProbeReport>| p.as_ref().map_or("n/a".into(), |p| format!("{:.1}", 100.0 * p.accuracy));
    let mse = |p: &Option<ProbeReport>| p.as_ref().map_or("n/a".into(), |p| format!("{:.5}", p.mean_mse));
    Table {
        columns: vec![
            "seed".into(),
            "random acc".into(),
            "baseline acc".into(),
            "ROSA acc".into(),
            "random mse".into(),
            "baseline mse".into(),
            "ROSA mse".into(),
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.seed_index.to_string(),
                    acc(&r.random_init),
                    acc(&r.baseline),
                    acc(&r.rosa),
                    mse(&r.random_init),
                    mse(&r.baseline),
                    mse(&r.rosa),
                ]
            })
            .collect(),
    }
}

/// Runs one comparison grid, writing corpora, checkpoints and reports under `out_dir`.
///
/// Cells that fail are recorded with their error; the rest still run.
pub fn run_experiment(kind: ExperimentKind, cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_resolved(out_dir)?;
    let specs = plan(kind, cfg);
    let x = &cfg.experiment;
    let probe_demos = x.probe_demos.filter(|_| kind == ExperimentKind::DataScale);
    let mut artifacts = BTreeMap::new();

    let seeds: Vec<Result<SeedData>> = (0..x.seeds)
        .into_par_iter()
        .map(|i| {
            let mine: Vec<&CellSpec> = specs.iter().filter(|c| c.seed_index == i).collect();
            prepare_seed(cfg, i, &mine, probe_demos.is_some())
        })
        .collect();
    for (i, s) in seeds.iter().enumerate() {
        if let Ok(d) = s {
            let actions = d.actions.clone();
            let states: Vec<SampleRecord> = d.states.values().flatten().cloned().collect();
            write_corpus(out_dir, &format!("seed{i}/corpus"), &corpus(cfg, "experiment", d.seed, actions, states), &mut artifacts)?;
            if !d.probe.is_empty() {
                let probe = build_state_samples(&d.probe, &cfg.tokenizer)?;
                write_corpus(out_dir, &format!("seed{i}/probe"), &corpus(cfg, "probe", d.seed, Vec::new(), probe), &mut artifacts)?;
            }
        }
    }

    let outcomes: Vec<std::result::Result<CellOutcome, String>> = specs
        .par_iter()
        .map(|spec| {
            let data = seeds[spec.seed_index].as_ref().map_err(|e| e.to_string())?;
            let probe = probe_demos == Some(spec.demos);
            run_cell(cfg, spec, data, probe).map_err(|e| e.to_string())
        })
        .collect();
    let mut cells = Vec::with_capacity(specs.len());
    for (spec, o) in specs.iter().zip(outcomes) {
        match o {
            Ok(o) => {
                for (rel, bytes) in &o.files {
                    write_artifact(out_dir, rel, bytes, &mut artifacts)?;
                }
                cells.push(o.report);
            }
            Err(e) => cells.push(CellReport {
                row: spec.row.clone(),
                policy: spec.policy.to_string(),
                seed_index: spec.seed_index,
                demos_per_task: spec.demos,
                ratio: spec.ratio,
                scene: spec.scene,
                train_steps: 0,
                final_loss: None,
                success: None,
                probe: None,
                checkpoint: None,
                error: Some(e),
            }),
        }
    }

    let mut probe_rows = Vec::new();
    if let Some(n) = probe_demos {
        for (i, s) in seeds.iter().enumerate() {
            let Ok(d) = s else { continue };
            let pick = |policy: &str| {
                cells
                    .iter()
                    .find(|c| c.seed_index == i && c.demos_per_task == n && c.policy == policy)
                    .and_then(|c| c.probe.clone())
            };
            // the same initialization the trained cells of this seed started from
            let random = Model::<f32>::new(cfg.model, cfg.tokenizer.clone(), derive_stream(d.seed, 0))
                .and_then(|m| linear_probe(&m, &d.probe, &cfg.probe))
                .ok();
            probe_rows.push(ProbeRow {
                seed_index: i,
                random_init: random,
                baseline: pick("baseline"),
                rosa: pick("rosa"),
            });
        }
    }

    let aggregates = aggregate(&cells);
    let table = build_table(kind, &aggregates, &cells);
    let report = ExperimentReport {
        kind,
        seed: cfg.seed,
        probe_table: (!probe_rows.is_empty()).then(|| probe_table(&probe_rows)),
        probe: probe_rows,
        cells,
        aggregates,
        table,
        artifacts,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let mut cfg = RunConfig::default();
        cfg.experiment.seeds = 1;
        assert_eq!(plan(ExperimentKind::DataScale, &cfg).len(), 8);
        assert_eq!(plan(ExperimentKind::OneShot, &cfg).len(), 2);
        assert_eq!(plan(ExperimentKind::RatioSweep, &cfg).len(), 4);
        assert_eq!(plan(ExperimentKind::SceneSweep, &cfg).len(), 5);
        cfg.experiment.seeds = 3;
        assert_eq!(plan(ExperimentKind::Generalization, &cfg).len(), 6);
    }

    #[test]
    fn kinds_parse() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("tab1".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn table_renders_aligned() {
        let t = Table {
            columns: vec!["a".into(), "value".into()],
            rows: vec![vec!["long name".into(), "1".into()]],
        };
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "a          value");
        assert_eq!(lines[2], "long name      1");
    }
}
