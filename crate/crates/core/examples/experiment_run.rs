// Runs every stage of an experiment into a scratch directory and prints the comparison table.

use restore_rl::config::ExperimentConfig;
use restore_rl::pipeline::{Pipeline, COMPARISON_FILE};

pub fn run_example() -> restore_rl::Result<()> {
    let dir = std::env::temp_dir().join(format!("restore-rl-example-{}", std::process::id()));
    let overrides: Vec<String> = [
        "dataset.n=30",
        "dataset.height=16",
        "dataset.width=16",
        "model.width=4",
        "model.depth=1",
        "model.time_embed_dim=4",
        "schedule.num_steps=20",
        "schedule.sampling_steps=5",
        "sft.steps=30",
        "sft.batch_size=8",
        "scorer.epochs=100",
        "rl.iterations=2",
        "rl.batch_size=4",
        "rl.eval_size=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir={}", dir.display())])
    .collect();
    let config = ExperimentConfig::resolve(None, &overrides)?;
    let pipeline = Pipeline::new(config);
    let result = pipeline.run_all(false);
    let table = std::fs::read_to_string(dir.join("eval").join(COMPARISON_FILE));
    let _ = std::fs::remove_dir_all(&dir);
    result?;
    print!("{}", table.map_err(|e| restore_rl::Error::Format(e.to_string()))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}
