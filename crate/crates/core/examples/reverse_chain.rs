// Samples a reverse chain with an untrained denoiser and replays its log-probabilities.

use restore_rl::diffusion::{forward_sample, replay_log_probs, sample_trajectory, Refinement};
use restore_rl::model::{init_model, ArchConfig};
use restore_rl::rng;
use restore_rl::schedule::{build_schedule, ScheduleKind};
use restore_rl::{Grid, Shape};

pub fn run_example() -> restore_rl::Result<()> {
    let base = build_schedule(50, 1e-3, 0.2, ScheduleKind::Linear)?;
    let sampling = base.respace(10)?;
    println!("sampling timesteps {:?}", sampling.model_timesteps());

    let shape = Shape::new(1, 8, 8);
    let clean = Grid::filled(shape, 0.6);
    let noise = Grid::standard_normal(shape, &mut rng::stream(1, 0));
    for t in [1, 25, 50] {
        let x_t = forward_sample(&clean, t, &noise, &base)?;
        println!("t={t:>2}  abar={:.4}  mean(x_t)={:.4}", base.alpha_bar(t), x_t.values.mean());
    }

    let arch = ArchConfig {
        channels: 1,
        width: 4,
        depth: 1,
        time_embed_dim: 4,
    };
    let model = init_model(arch, &mut rng::stream(1, 1))?;
    let cond = Grid::filled(shape, 0.2);
    for refinement in [Refinement::NONE, Refinement::ONE] {
        let traj = sample_trajectory(&model, &cond, "demo", &sampling, 1, 7, refinement)?;
        let replayed = replay_log_probs(&model, &traj, &cond, &sampling)?;
        let drift = traj
            .steps
            .iter()
            .zip(&replayed)
            .map(|(s, r)| (s.log_prob - r).abs())
            .fold(0.0, f64::max);
        println!(
            "refinement={}  steps={}  total log-prob={:.2}  replay drift={drift:.1e}",
            refinement.iterations,
            traj.len(),
            traj.total_log_prob()
        );
        assert!(drift < 1e-9);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}
