// Supervised warm-up of a tiny restorer followed by a few policy-gradient iterations.

use restore_rl::bench::{generate_split, DatasetConfig, ProceduralScenes, Split};
use restore_rl::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use restore_rl::model::{init_model, ArchConfig};
use restore_rl::optim::OptimizerState;
use restore_rl::reward::{train_quality_scorer, RewardBackend, ScorerConfig};
use restore_rl::rl::{run_rl_training, RlConfig, RlInputs};
use restore_rl::rng;
use restore_rl::schedule::{build_schedule, ScheduleKind};
use restore_rl::sft::{train_sft, SftConfig};
use restore_rl::Grid;

pub fn run_example() -> restore_rl::Result<()> {
    let seed = 4;
    let data = DatasetConfig {
        n: 40,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let train = generate_split(&data, &ProceduralScenes, Split::Train)?;
    let val = generate_split(&data, &ProceduralScenes, Split::Val)?;
    let test = generate_split(&data, &ProceduralScenes, Split::Test)?;
    let base = build_schedule(20, 1e-3, 0.2, ScheduleKind::Linear)?;
    let sampling = base.respace(5)?;

    let arch = ArchConfig {
        channels: 1,
        width: 6,
        depth: 1,
        time_embed_dim: 4,
    };
    let mut params = init_model(arch, &mut rng::stream(seed, 1))?;
    let mut optimizer = OptimizerState::new(params.param_count());
    let pairs: Vec<(&Grid, &Grid)> = train.iter().map(|p| (&p.gt, &p.degraded)).collect();
    let sft = SftConfig {
        steps: 60,
        batch_size: 8,
        ..SftConfig::default()
    };
    let losses = train_sft(&mut params, &mut optimizer, &pairs, &base, &sft, &mut rng::stream(seed, 2))?;
    println!("denoising loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);

    let scorer_cfg = ScorerConfig {
        epochs: 200,
        ..ScorerConfig::default()
    };
    let scorer = train_quality_scorer(&train, &val, &scorer_cfg, &mut rng::stream(seed, 3))?;

    let start = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        stage: "sft".into(),
        params,
        optimizer,
        schedule_hash: sampling.hash(),
        step: sft.steps,
        rng: rng::RngState::capture(&rng::stream(seed, 0)),
        config: serde_json::Value::Null,
        aux: serde_json::Value::Null,
    };
    let inputs = RlInputs {
        train: &train,
        eval: &test,
        sft_schedule: &base,
        sampling_schedule: &sampling,
        quality_scorer: &scorer,
        scorer_config: &scorer_cfg,
        seed,
    };
    let config = RlConfig {
        iterations: 3,
        batch_size: 4,
        eval_size: 4,
        ..RlConfig::default()
    };
    let outcome = run_rl_training(inputs, config, &start, RewardBackend::Proxy(scorer.clone()), None, None)?;
    for r in &outcome.records {
        println!(
            "iteration {}  reward {:.3}  PSNR {:.2}  SSIM {:.3}",
            r.iteration, r.mean_reward, r.psnr, r.ssim
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}
