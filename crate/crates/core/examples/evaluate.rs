//! Closed-loop success rates of the scripted expert and of an untrained model.

use rosa::collect::ExpertConfig;
use rosa::common::derive_stream;
use rosa::eval::{format_pm, success_rate, EvalConfig, ExpertPolicy};
use rosa::model::{Model, ModelConfig};
use rosa::sim::{default_tasks, SimConfig};
use rosa::tokenizer::TokenizerSpec;

fn main() -> rosa::Result<()> {
    let sim = SimConfig::default();
    let tasks = default_tasks();
    let cfg = EvalConfig {
        episodes_per_task: 10,
        ..Default::default()
    };
    let expert = success_rate(&ExpertPolicy(ExpertConfig::default()), &tasks, &sim, &cfg)?;
    let tok = TokenizerSpec::for_workspace(&sim.workspace, 256);
    let model: Model = Model::new(ModelConfig::default(), tok, derive_stream(0, 0))?;
    let random = success_rate(&model, &tasks, &sim, &cfg)?;
    for (name, r) in [("expert", &expert), ("random init", &random)] {
        println!("{name:12} {}  ({}/{})", format_pm(r.mean, r.std), r.successes, r.episodes);
        for t in &r.tasks {
            println!("  {:20} {}", t.task, format_pm(t.mean, t.std));
        }
    }
    Ok(())
}
