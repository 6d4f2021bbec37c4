#![allow(dead_code)]

use restore_rl::diffusion::{sample_trajectory, Refinement, Trajectory};
use restore_rl::grid::{Grid, Shape};
use restore_rl::model::{init_model, ArchConfig, ModelParams};
use restore_rl::rng;
use restore_rl::schedule::{build_schedule, DiffusionSchedule, ScheduleKind};

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        channels: 1,
        width: 4,
        depth: 1,
        time_embed_dim: 4,
    }
}

pub fn tiny_model(seed: u64) -> ModelParams {
    init_model(tiny_arch(), &mut rng::stream(seed, 11)).unwrap()
}

/// Base chain of 20 steps and its 5-step sampling subsequence.
pub fn tiny_schedules() -> (DiffusionSchedule, DiffusionSchedule) {
    let base = build_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let sampling = base.respace(5).unwrap();
    (base, sampling)
}

pub fn uniform_grid(shape: Shape, seed: u64, stream: u64) -> Grid {
    use rand::Rng;
    let mut r = rng::stream(seed, stream);
    let data = (0..shape.len()).map(|_| r.random::<f64>()).collect();
    Grid::from_vec(shape, data).unwrap()
}

pub fn perturbed(params: &ModelParams, scale: f64, seed: u64) -> ModelParams {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, 12);
    let values = params
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut r);
            v + scale * z
        })
        .collect();
    ModelParams::from_values(params.arch, values).unwrap()
}

pub fn rollouts(params: &ModelParams, conds: &[Grid], schedule: &DiffusionSchedule, refinement: Refinement) -> Vec<Trajectory> {
    conds
        .iter()
        .enumerate()
        .map(|(k, c)| sample_trajectory(params, c, &format!("c{k}"), schedule, 3, k as u64, refinement).unwrap())
        .collect()
}

/// Central differences of `f` around `params`, one coordinate at a time.
pub fn finite_difference(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.values().to_vec();
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            up[i] += h;
            let mut down = base.clone();
            down[i] -= h;
            let fu = f(&ModelParams::from_values(params.arch, up).unwrap());
            let fd = f(&ModelParams::from_values(params.arch, down).unwrap());
            (fu - fd) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

/// Cumulative products of `1 - beta`, computed without the schedule type.
pub fn alpha_bars_from_betas(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// Policy mean at 1-based step `t`, rebuilt from the betas and the raw noise estimate.
pub fn oracle_policy_mean(betas: &[f64], x_t: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
    let ab = alpha_bars_from_betas(betas);
    let ab_t = ab[t - 1];
    let ab_prev = if t == 1 { 1.0 } else { ab[t - 2] };
    let beta = betas[t - 1];
    x_t.iter()
        .zip(eps)
        .map(|(&x, &e)| {
            let x0 = (x - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt();
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            c0 * x0 + ct * x
        })
        .collect()
}

/// Elementwise sum of univariate normal log-densities.
pub fn oracle_log_density(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    x.iter()
        .zip(mean)
        .map(|(&xi, &mi)| -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - (xi - mi).powi(2) / (2.0 * variance))
        .sum()
}

/// A configuration small enough to run every stage in a few seconds.
pub fn tiny_experiment(dir: &std::path::Path) -> restore_rl::config::ExperimentConfig {
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
        "scorer.refresh_epochs=10",
        "rl.iterations=2",
        "rl.batch_size=4",
        "rl.eval_size=4",
        "rl.scorer_refresh_every=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(std::iter::once(format!("output_dir={}", dir.display())))
    .collect();
    restore_rl::config::ExperimentConfig::resolve(None, &overrides).unwrap()
}
