//! The run configuration shared by every command and experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collect::{ExpertConfig, StateCollectConfig};
use crate::dataset::{ImageDims, MixConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ExperimentConfig, ProbeConfig};
use crate::keyframe::KeyframeConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::sim::{default_tasks, generalization_tasks, SimConfig, TaskSpec};
use crate::tokenizer::TokenizerSpec;

/// Every field is required; `RunConfig::default()` is the documented reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// World constants, including the workspace bounds.
    pub sim: SimConfig,
    pub tasks: Vec<TaskSpec>,
    /// Held-out tasks used only by the generalization experiment.
    pub generalization_tasks: Vec<TaskSpec>,
    pub tokenizer: TokenizerSpec,
    pub keyframe: KeyframeConfig,
    pub expert: ExpertConfig,
    pub state_collect: StateCollectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mix: MixConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            tokenizer: TokenizerSpec::for_workspace(&sim.workspace, 256),
            sim,
            tasks: default_tasks(),
            generalization_tasks: generalization_tasks(),
            keyframe: KeyframeConfig::default(),
            expert: ExpertConfig::default(),
            state_collect: StateCollectConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mix: MixConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

fn invalid(path: &str, message: impl std::fmt::Display) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}

impl RunConfig {
    /// Parses JSON, reporting the path of the first offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes `resolved_config.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn image(&self) -> ImageDims {
        ImageDims {
            height: self.sim.image_height,
            width: self.sim.image_width,
        }
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .chain(&self.generalization_tasks)
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown task `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &'static str| move |e: Error| invalid(path, e);
        self.sim.validate().map_err(wrap("sim"))?;
        if self.tasks.is_empty() {
            return Err(invalid("tasks", "at least one task is required"));
        }
        let mut names = Vec::new();
        for (key, list) in [("tasks", &self.tasks), ("generalization_tasks", &self.generalization_tasks)] {
            for (i, t) in list.iter().enumerate() {
                t.validate(&self.sim.workspace)
                    .map_err(|e| invalid(&format!("{key}[{i}]"), e))?;
                if names.contains(&&t.name) {
                    return Err(invalid(&format!("{key}[{i}].name"), format!("duplicate task `{}`", t.name)));
                }
                names.push(&t.name);
                self.tokenizer
                    .encode_text(&t.instruction)
                    .map_err(|e| invalid(&format!("{key}[{i}].instruction"), e))?;
            }
        }
        let ws = &self.sim.workspace;
        let r = self.tokenizer.ranges();
        for (d, axis) in ws.axes().iter().enumerate() {
            if r[d].min > axis.min || r[d].max < axis.max {
                return Err(invalid(
                    "tokenizer.ranges",
                    format!("range {d} does not cover the workspace"),
                ));
            }
        }
        self.keyframe.validate().map_err(wrap("keyframe"))?;
        if self.expert.max_substeps == 0 || !ws.z.contains(self.expert.hover_z) {
            return Err(invalid("expert", "hover_z must lie in the workspace and max_substeps >= 1"));
        }
        if self.state_collect.stride == 0 || self.state_collect.max_substeps == 0 {
            return Err(invalid("state_collect", "stride and max_substeps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.state_collect.gripper_toggle_prob) {
            return Err(invalid("state_collect.gripper_toggle_prob", "must lie in [0, 1]"));
        }
        self.model.validate().map_err(wrap("model"))?;
        if (self.model.image_height, self.model.image_width) != (self.sim.image_height, self.sim.image_width) {
            return Err(invalid("model", "image size differs from the simulator's"));
        }
        self.train.validate().map_err(wrap("train"))?;
        self.mix.validate().map_err(wrap("mix"))?;
        self.eval.validate().map_err(wrap("eval"))?;
        self.probe.validate().map_err(wrap("probe"))?;
        self.experiment.validate().map_err(wrap("experiment"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_fields_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        v["train"].as_object_mut().unwrap().remove("lr");
        let e = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("train") && e.contains("lr"), "{e}");

        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        v["eval"]["episodes"] = 3.into();
        let e = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("eval") && e.contains("episodes"), "{e}");
    }

    #[test]
    fn range_errors_are_caught() {
        let mut cfg = RunConfig::default();
        cfg.model.image_width = 56;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.lr = -1.0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("`train`"), "{e}");
    }
}
