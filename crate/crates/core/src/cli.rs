//! The `rosa` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::collect::{collect_demos, collect_states, SceneType};
use crate::common::derive_stream;
use crate::config::RunConfig;
use crate::dataset::{
    build_action_samples, build_state_samples, parse_ratio, write_json, Corpus, CorpusMeta, MixConfig, Provenance,
    SampleRecord,
};
use crate::error::{Error, Result};
use crate::eval::{
    episode_stream, format_pm, linear_probe_records, rollout_frames, run_experiment, success_rate, ExperimentKind,
};
use crate::keyframe::{extract, KeyframeConfig, TrajectoryPoint};
use crate::model::{train, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "rosa", version, about = "Vision-language-action policies co-trained on robot state estimation")]
pub struct Cli {
    /// Worker threads for collection, training and evaluation (results do not depend on it).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations and write an action corpus.
    CollectExpert {
        #[command(flatten)]
        config: ConfigArg,
        /// Demonstrations per task.
        #[arg(long)]
        demos: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record random-motion state samples and write a state corpus.
    CollectState {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value = "relevant")]
        scene_type: SceneType,
        /// Samples per scene; defaults to the experiment setting.
        #[arg(long)]
        steps_per_scene: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the keyframe indices of a trajectory file (JSON array or JSONL of points).
    Keyframes {
        #[arg(long)]
        trajectory: PathBuf,
        /// Take the keyframe settings from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a policy; `--ratio 0` gives the actions-only baseline.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        states: Option<PathBuf>,
        /// State records per action record, e.g. `0.25` or `1/4`.
        #[arg(long, value_parser = parse_ratio_arg)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop success rate of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Task names; defaults to the configured tasks.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        tasks: Vec<String>,
        /// Directory for report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's features on a state corpus.
    Probe {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        states: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full comparison grid.
    Experiment {
        #[arg(long)]
        kind: ExperimentKind,
        #[command(flatten)]
        config: ConfigArg,
        /// Defaults to `<output_dir>/<kind>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the frames of one rollout as numbered PGM files.
    Render {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration.
    DefaultConfig,
}

fn parse_ratio_arg(s: &str) -> std::result::Result<f64, String> {
    parse_ratio(s).map_err(|e| e.to_string())
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load(arg: &ConfigArg) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(&arg.config).map_err(Failure::Config)
}

fn corpus(cfg: &RunConfig, source: &str, seed: u64, detail: serde_json::Value, actions: Vec<SampleRecord>, states: Vec<SampleRecord>) -> Corpus {
    Corpus {
        meta: CorpusMeta {
            tokenizer: cfg.tokenizer.clone(),
            workspace: cfg.sim.workspace,
            image: cfg.image(),
            actions: actions.len(),
            states: states.len(),
            provenance: Provenance {
                source: source.into(),
                seed,
                tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
                detail,
            },
        },
        actions,
        states,
    }
}

fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        return crate::dataset::read_json(path);
    }
    crate::dataset::read_jsonl(path)
}

fn check_corpus(cfg: &RunConfig, c: &Corpus, path: &Path) -> Result<()> {
    if c.meta.tokenizer != cfg.tokenizer || c.meta.image != cfg.image() {
        return Err(Error::invalid(format!(
            "{}: corpus tokenizer or image size differs from the run config",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::CollectExpert { config, demos, out } => {
            let cfg = load(&config)?;
            let stream = derive_stream(cfg.seed, 0);
            let d = collect_demos(&cfg.tasks, demos, &cfg.sim, &cfg.expert, stream)?;
            let actions = build_action_samples(&d, &cfg.keyframe, &cfg.tokenizer)?;
            let detail = serde_json::json!({ "demos_per_task": demos });
            let n = actions.len();
            corpus(&cfg, "expert", cfg.seed, detail, actions, Vec::new()).write(&out)?;
            cfg.write_resolved(&out)?;
            println!("wrote {n} action records from {} demonstrations to {}", d.len(), out.display());
        }
        Command::CollectState {
            config,
            scenes,
            scene_type,
            steps_per_scene,
            out,
        } => {
            let cfg = load(&config)?;
            let steps = steps_per_scene.unwrap_or(cfg.experiment.state_steps_per_scene);
            let stream = derive_stream(cfg.seed, 1);
            let samples = collect_states(scene_type, &cfg.tasks, scenes, steps, &cfg.sim, &cfg.state_collect, stream)?;
            let states = build_state_samples(&samples, &cfg.tokenizer)?;
            let detail = serde_json::json!({ "scene_type": scene_type, "scenes": scenes, "steps_per_scene": steps });
            let n = states.len();
            corpus(&cfg, "state", cfg.seed, detail, Vec::new(), states).write(&out)?;
            cfg.write_resolved(&out)?;
            println!("wrote {n} state records to {}", out.display());
        }
        Command::Keyframes { trajectory, config } => {
            let kcfg = match config {
                Some(p) => RunConfig::load(&p).map_err(Failure::Config)?.keyframe,
                None => KeyframeConfig::default(),
            };
            let points = read_trajectory(&trajectory)?;
            let keys = extract(&points, &kcfg)?;
            println!("{}", keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "));
        }
        Command::Train {
            config,
            actions,
            states,
            ratio,
            out,
        } => {
            let cfg = load(&config)?;
            let a = Corpus::read(&actions)?;
            check_corpus(&cfg, &a, &actions)?;
            let s = match &states {
                Some(p) => {
                    let c = Corpus::read(p)?;
                    check_corpus(&cfg, &c, p)?;
                    c.states
                }
                None if ratio > 0.0 => return Err(Error::invalid("--ratio > 0 needs --states").into()),
                None => Vec::new(),
            };
            let mix = MixConfig {
                state_ratio: ratio,
                seed: cfg.mix.seed,
            };
            let outcome = train(&cfg.model, &cfg.train, &cfg.tokenizer, &cfg.image(), &a.actions, &s, &mix)?;
            outcome.checkpoint.save(&out)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut metrics = out.clone().into_os_string();
            metrics.push(".metrics.jsonl");
            crate::dataset::write_jsonl(Path::new(&metrics), &outcome.steps)?;
            cfg.write_resolved(dir)?;
            let last = outcome.epochs.last().expect("at least one epoch");
            println!(
                "trained {} steps; final epoch loss {:.4}, masked-token accuracy {:.3}; sha256 {}",
                outcome.steps.len(),
                last.loss,
                last.acc,
                outcome.checkpoint.sha256()
            );
        }
        Command::Eval {
            config,
            ckpt,
            tasks,
            out,
        } => {
            let cfg = load(&config)?;
            let model = Checkpoint::load(&ckpt)?.model;
            let selected = if tasks.is_empty() {
                cfg.tasks.clone()
            } else {
                tasks.iter().map(|t| cfg.task(t).cloned()).collect::<Result<Vec<_>>>()?
            };
            let report = success_rate(&model, &selected, &cfg.sim, &cfg.eval)?;
            for t in &report.tasks {
                println!("{:24} {}  ({}/{})", t.task, format_pm(t.mean, t.std), t.successes, t.episodes);
            }
            println!("{:24} {}", "mean", format_pm(report.mean, report.std));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_json(&dir.join("report.json"), &report)?;
                cfg.write_resolved(&dir)?;
            }
        }
        Command::Probe {
            config,
            ckpt,
            states,
            out,
        } => {
            let cfg = load(&config)?;
            let model = Checkpoint::load(&ckpt)?.model;
            let c = Corpus::read(&states)?;
            check_corpus(&cfg, &c, &states)?;
            let report = linear_probe_records(&model, &c.states, &cfg.image(), &cfg.probe)?;
            println!(
                "accuracy {:.1}% (tau {} m), mean mse {:.6}, train {} / test {}",
                100.0 * report.accuracy,
                report.tau,
                report.mean_mse,
                report.n_train,
                report.n_test
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_json(&dir.join("report.json"), &report)?;
                cfg.write_resolved(&dir)?;
            }
        }
        Command::Experiment { kind, config, out } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join(kind.name()));
            let report = run_experiment(kind, &cfg, &dir)?;
            print!("{}", report.to_text());
        }
        Command::Render {
            config,
            ckpt,
            task,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            let model = Checkpoint::load(&ckpt)?.model;
            let spec = cfg.task(&task)?.clone();
            let (result, frames) = rollout_frames(&model, &spec, &cfg.sim, episode_stream(seed, &task, 0, 0), &cfg.eval);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, f) in frames.iter().enumerate() {
                let p = out.join(format!("frame_{i:05}.pgm"));
                std::fs::write(&p, f.to_pgm()).map_err(|e| Error::io(&p, e))?;
            }
            write_json(&out.join("episode.json"), &result)?;
            cfg.write_resolved(&out)?;
            println!(
                "{} frames, {} keyframes, success {}",
                frames.len(),
                result.keyframes,
                result.success
            );
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_json()),
    }
    Ok(())
}

/// Parses arguments and runs; exit code 0 on success, 1 for invalid configs or arguments, 2 for runtime errors.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
