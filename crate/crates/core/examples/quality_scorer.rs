// Builds a small low-light benchmark and fits the no-reference quality scorer on it.

use restore_rl::bench::{generate_split, DatasetConfig, ProceduralScenes, Split};
use restore_rl::reward::scorer::severity_rank_correlation;
use restore_rl::reward::{iqa_reward, train_quality_scorer, ScorerConfig};
use restore_rl::rng;

pub fn run_example() -> restore_rl::Result<()> {
    let cfg = DatasetConfig {
        n: 60,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let train = generate_split(&cfg, &ProceduralScenes, Split::Train)?;
    let val = generate_split(&cfg, &ProceduralScenes, Split::Val)?;
    let test = generate_split(&cfg, &ProceduralScenes, Split::Test)?;
    println!("{} train / {} val / {} test pairs", train.len(), val.len(), test.len());

    let scorer_cfg = ScorerConfig {
        epochs: 300,
        ..ScorerConfig::default()
    };
    let scorer = train_quality_scorer(&train, &val, &scorer_cfg, &mut rng::stream(cfg.seed, 3))?;

    let mut clean = 0.0;
    let mut degraded = 0.0;
    for pair in &test {
        clean += iqa_reward(&scorer, &pair.gt)?;
        degraded += iqa_reward(&scorer, &pair.degraded)?;
    }
    let n = test.len() as f64;
    println!("mean score  clean {:.3}  degraded {:.3}", clean / n, degraded / n);
    println!("held-out rank correlation with severity {:.3}", severity_rank_correlation(&scorer, &test)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}
