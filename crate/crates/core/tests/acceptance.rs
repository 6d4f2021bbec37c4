//! One PASS/FAIL line per acceptance criterion. The long-running end-to-end
//! criteria (7 and 8) share a single prepared experiment directory.

mod common;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use itertools::Itertools;
use rand::seq::IndexedRandom;
use restore_rl::bench::{degrade, generate_split, DatasetConfig, ProceduralScenes, RestorationPair, Split};
use restore_rl::config::ExperimentConfig;
use restore_rl::diffusion::{forward_sample, sample_trajectory, Refinement};
use restore_rl::grid::{Grid, Shape};
use restore_rl::metrics::ot::pairwise_costs;
use restore_rl::metrics::{empirical_ot_cost, spearman, GroundCost, MetricsRecord};
use restore_rl::model::ModelParams;
use restore_rl::pipeline::{Pipeline, METRICS_FILE};
use restore_rl::reward::scorer::severity_rank_correlation;
use restore_rl::reward::{advantage, iqa_reward, train_quality_scorer, RewardStats, ScorerConfig};
use restore_rl::rl::difficulty::weights_from_errors;
use restore_rl::rl::{
    clipped_objective, combined_loss, importance_ratio, kl_penalty, prepare_policy_steps, surrogate_term, LossWeights,
    RlConfig, TrainingMode,
};
use restore_rl::rng;
use restore_rl::schedule::{build_schedule, ScheduleKind};
use restore_rl::sft::{draw_sft_batch, sft_loss_with_draws, sft_sample_terms};

fn report(criterion: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("\n{verdict} criterion {criterion}: {}\n", detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} failed: {}", detail.as_ref());
}

#[test]
fn criterion_1_forward_statistics() {
    let started = Instant::now();
    let (num_steps, b0, b1) = (50usize, 1e-3, 0.2);
    let base = build_schedule(num_steps, b0, b1, ScheduleKind::Linear).unwrap();
    let betas: Vec<f64> = (0..num_steps).map(|i| b0 + (b1 - b0) * i as f64 / (num_steps - 1) as f64).collect();
    let abar = alpha_bars_from_betas(&betas);
    let x0 = Grid::scalar(0.7);
    let n = 10_000usize;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for t in [1usize, 25, 50] {
        let mut r = rng::stream(17, t as u64);
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let noise = Grid::standard_normal(x0.shape(), &mut r);
                forward_sample(&x0, t, &noise, &base).unwrap().values.data()[0]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sigma2) = (abar[t - 1].sqrt() * 0.7, 1.0 - abar[t - 1]);
        let z_mean = (mean - mu).abs() / (sigma2 / n as f64).sqrt();
        let z_var = (var - sigma2).abs() / (sigma2 * (2.0 / (n - 1) as f64).sqrt());
        worst = worst.max(z_mean).max(z_var);
        lines.push(format!("t={t} |z_mean|={z_mean:.2} |z_var|={z_var:.2}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        worst <= 3.0 && elapsed < 60.0,
        format!("forward moments within {worst:.2} SE (limit 3) [{}] in {elapsed:.1}s", lines.join(", ")),
    );
}

#[test]
fn criterion_2_density_oracle() {
    let started = Instant::now();
    let base = build_schedule(50, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let sampling = base.respace(10).unwrap();
    let params = tiny_model(2);
    let betas = sampling.betas().to_vec();
    let abar = alpha_bars_from_betas(&betas);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..10u64 {
        let cond = uniform_grid(Shape::new(1, 6, 6), 8, k);
        let traj = sample_trajectory(&params, &cond, "oracle", &sampling, 8, 100 + k, Refinement::ONE).unwrap();
        for step in &traj.steps {
            let t = step.state.t;
            let eps = params.forward(&step.state.values, &cond, sampling.model_timestep(t)).unwrap();
            let mean = oracle_policy_mean(&betas, step.state.values.data(), eps.data(), t);
            let ab_prev = if t == 1 { 1.0 } else { abar[t - 2] };
            let variance = (betas[t - 1] * (1.0 - ab_prev) / (1.0 - abar[t - 1])).max(1e-6);
            let oracle = oracle_log_density(step.action.values.data(), &mean, variance);
            worst = worst.max((oracle - step.log_prob).abs());
            checked += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        2,
        checked == 100 && worst < 1e-6 && elapsed < 60.0,
        format!("{checked} recorded log-probs, max |diff| {worst:.2e} (limit 1e-6) in {elapsed:.1}s"),
    );
}

fn gradient_error(params: &ModelParams, analytic: &[f64], f: impl Fn(&ModelParams) -> f64) -> f64 {
    let numeric = finite_difference(params, 1e-5, f);
    if analytic.iter().all(|g| g.abs() < 1e-9) {
        return f64::INFINITY;
    }
    relative_error(analytic, &numeric)
}

#[test]
fn criterion_3_gradient_checks() {
    let started = Instant::now();
    let (base, sampling) = tiny_schedules();
    let old = tiny_model(1);
    let params = perturbed(&old, 2e-3, 5);
    let conds: Vec<Grid> = (0..3).map(|k| uniform_grid(Shape::new(1, 4, 4), 5, k)).collect();
    let x0: Vec<Grid> = (0..3).map(|k| uniform_grid(Shape::new(1, 4, 4), 6, k)).collect();
    let pairs: Vec<(&Grid, &Grid)> = x0.iter().zip(&conds).collect();
    let draws = draw_sft_batch(&pairs, &base, &mut rng::stream(2, 1));
    let trajectories = rollouts(&old, &conds, &sampling, Refinement::ONE);
    let refs: Vec<&Grid> = conds.iter().collect();
    let advantages: Vec<Vec<f64>> = (0..3).map(|k| (0..5).map(|s| 0.3 * s as f64 - 0.5 * k as f64).collect()).collect();
    let steps = prepare_policy_steps(&old, &trajectories, &refs, &advantages, &sampling).unwrap();
    let weights = [0.25, 1.0, 0.6];
    let lw = LossWeights {
        clip_eps: 0.2,
        kl_weight: 0.05,
    };

    let errors = [
        ("sft_loss", {
            let (_, g) = sft_loss_with_draws(&params, &draws, &base).unwrap();
            gradient_error(&params, &g, |p| sft_loss_with_draws(p, &draws, &base).unwrap().0)
        }),
        ("clipped_objective", {
            let (_, g) = clipped_objective(&params, &steps, 3, 0.2, &sampling).unwrap();
            gradient_error(&params, &g, |p| clipped_objective(p, &steps, 3, 0.2, &sampling).unwrap().0)
        }),
        ("kl_penalty", {
            let (_, g) = kl_penalty(&params, &steps, 0.5, &sampling).unwrap();
            gradient_error(&params, &g, |p| kl_penalty(p, &steps, 0.5, &sampling).unwrap().0)
        }),
        ("combined_loss", {
            let terms = sft_sample_terms(&params, &draws, &base).unwrap();
            let (_, g) = combined_loss(&params, &terms, &steps, &weights, &lw, &sampling).unwrap();
            gradient_error(&params, &g, |p| {
                let terms = sft_sample_terms(p, &draws, &base).unwrap();
                combined_loss(p, &terms, &steps, &weights, &lw, &sampling).unwrap().0.total
            })
        }),
    ];
    let elapsed = started.elapsed().as_secs_f64();
    let pass = params.param_count() <= 500 && errors.iter().all(|(_, e)| *e < 1e-4) && elapsed < 300.0;
    let detail = errors.iter().map(|(name, e)| format!("{name} {e:.1e}")).join(", ");
    report(
        3,
        pass,
        format!("{} params, relative errors [{detail}] (limit 1e-4) in {elapsed:.1}s", params.param_count()),
    );
}

#[test]
fn criterion_4_unit_identities() {
    let (base, sampling) = tiny_schedules();
    let params = tiny_model(3);
    let conds: Vec<Grid> = (0..2).map(|k| uniform_grid(Shape::new(1, 4, 4), 9, k)).collect();
    let x0: Vec<Grid> = (0..2).map(|k| uniform_grid(Shape::new(1, 4, 4), 10, k)).collect();
    let trajectories = rollouts(&params, &conds, &sampling, Refinement::ONE);
    let refs: Vec<&Grid> = conds.iter().collect();
    let advantages = vec![vec![0.75, -0.5, 1.25, 0.0, -2.0], vec![0.5; 5]];
    let steps = prepare_policy_steps(&params, &trajectories, &refs, &advantages, &sampling).unwrap();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let ratios_one = trajectories
        .iter()
        .zip(&conds)
        .all(|(tr, c)| tr.steps.iter().all(|s| importance_ratio(&params, &params, s, c, &sampling).unwrap() == 1.0));
    checks.push(("ratio = 1 at theta_old", ratios_one));
    checks.push(("KL = 0 at theta_old", kl_penalty(&params, &steps, 1.0, &sampling).unwrap().0 == 0.0));
    checks.push((
        "clipped term = A at ratio 1",
        [-2.0, -0.5, 0.0, 0.75, 3.0].iter().all(|&a| surrogate_term(1.0, a, 0.2) == a),
    ));
    checks.push(("g(0.2, 2) case gives 2.4", surrogate_term(1.5, 2.0, 0.2) == 2.4));
    checks.push(("g(0.2, -1) case gives -0.8", surrogate_term(0.5, -1.0, 0.2) == -0.8));
    checks.push(("weights [0.5, 1.0] for errors [2, 4]", weights_from_errors(&[2.0, 4.0]).unwrap() == vec![0.5, 1.0]));

    let pairs: Vec<(&Grid, &Grid)> = x0.iter().zip(&conds).collect();
    let draws = draw_sft_batch(&pairs, &base, &mut rng::stream(4, 0));
    let terms = sft_sample_terms(&params, &draws, &base).unwrap();
    let lw = LossWeights {
        clip_eps: 0.2,
        kl_weight: 0.0,
    };
    let (at_zero, _) = combined_loss(&params, &terms, &steps, &[0.0, 0.0], &lw, &sampling).unwrap();
    let diff_sum: f64 = terms.iter().map(|(l, _)| l).sum();
    checks.push(("w = 0 leaves only the diffusion loss", at_zero.total == diff_sum && at_zero.rl_term == 0.0));
    let (at_one, _) = combined_loss(&params, &terms, &steps, &[1.0, 1.0], &lw, &sampling).unwrap();
    let objective_sum: f64 = advantages.iter().map(|a| a.iter().sum::<f64>()).sum();
    checks.push(("w = 1 leaves only the policy term", at_one.diff_term == 0.0 && at_one.total == -objective_sum));

    let rewards = [0.25, 1.5, -0.75, 2.0];
    let advantages_for = |shift: f64| -> Vec<f64> {
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let mut stats = RewardStats::new(1e-8, 0.5, 0.9).unwrap();
        stats.set_batch(shifted.clone()).unwrap();
        for (i, r) in shifted.iter().enumerate() {
            stats.observe(&format!("img{i}"), &[*r]).unwrap();
        }
        shifted.iter().enumerate().map(|(i, r)| advantage(*r, &stats, &format!("img{i}")).unwrap()).collect()
    };
    checks.push(("advantage shift invariance", advantages_for(0.0) == advantages_for(8.0)));
    let mut stats = RewardStats::new(1e-8, 0.5, 0.9).unwrap();
    stats.set_batch(vec![0.625; 4]).unwrap();
    stats.observe("same", &[0.625, 0.625]).unwrap();
    checks.push(("equal rewards give zero advantage", advantage(0.625, &stats, "same").unwrap() == 0.0));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    report(
        4,
        failed.is_empty(),
        format!("{} exact identities, failing: {failed:?}", checks.len()),
    );
}

fn brute_force_ot(costs: &[Vec<f64>]) -> f64 {
    let n = costs.len();
    (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| costs[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_5_transport_cost() {
    let started = Instant::now();
    let shape = Shape::new(1, 4, 4);
    let mut worst_gap: f64 = 0.0;
    for trial in 0..10u64 {
        let a: Vec<Grid> = (0..6).map(|k| uniform_grid(shape, 20 + trial, k)).collect();
        let b: Vec<Grid> = (0..6).map(|k| uniform_grid(shape, 40 + trial, k)).collect();
        let costs = pairwise_costs(&a, &b, GroundCost::L2).unwrap();
        let direct: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x.distance(y).unwrap()).collect()).collect();
        let oracle = brute_force_ot(&direct);
        let gap = (empirical_ot_cost(&a, &b, GroundCost::L2).unwrap() - oracle).abs() / oracle;
        worst_gap = worst_gap.max(gap).max(relative_error(&costs.concat(), &direct.concat()));
    }

    let cfg = DatasetConfig {
        n: 120,
        height: 16,
        width: 16,
        train_fraction: 1.0,
        val_fraction: 0.0,
        ..DatasetConfig::default()
    };
    let pool = generate_split(&cfg, &ProceduralScenes, Split::Train).unwrap();
    let mut r = rng::stream(5, 5);
    let mut holds = 0;
    for _ in 0..100 {
        let picks: Vec<&RestorationPair> = pool.choose_multiple(&mut r, 16).collect();
        let same_a: Vec<Grid> = picks[..8].iter().map(|p| p.gt.clone()).collect();
        let same_b: Vec<Grid> = picks[8..].iter().map(|p| p.gt.clone()).collect();
        let cross: Vec<Grid> = picks[8..].iter().map(|p| p.degraded.clone()).collect();
        let within = empirical_ot_cost(&same_a, &same_b, GroundCost::L2).unwrap();
        let across = empirical_ot_cost(&same_a, &cross, GroundCost::L2).unwrap();
        holds += usize::from(within <= across);
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        5,
        worst_gap < 1e-12 && holds >= 95 && elapsed < 120.0,
        format!("size-6 optimum gap {worst_gap:.1e}, direction check held {holds}/100 (need 95) in {elapsed:.1}s"),
    );
}

#[test]
fn criterion_6_scorer_separation() {
    let started = Instant::now();
    let cfg = DatasetConfig::default();
    let train = generate_split(&cfg, &ProceduralScenes, Split::Train).unwrap();
    let val = generate_split(&cfg, &ProceduralScenes, Split::Val).unwrap();
    let test = generate_split(&cfg, &ProceduralScenes, Split::Test).unwrap();
    let scorer = train_quality_scorer(&train, &val, &ScorerConfig::default(), &mut rng::stream(0, 6)).unwrap();
    let mut r = rng::stream(6, 6);
    let (mut gt, mut heavy) = (0.0, 0.0);
    for p in &test {
        gt += iqa_reward(&scorer, &p.gt).unwrap();
        heavy += iqa_reward(&scorer, &degrade(&p.gt, cfg.task, 0.8, &mut r).unwrap()).unwrap();
    }
    let n = test.len() as f64;
    let rho = severity_rank_correlation(&scorer, &test).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        6,
        gt > heavy && rho >= 0.8 && elapsed < 600.0,
        format!(
            "held-out mean score clean {:.3} vs severity-0.8 {:.3}, rank correlation {rho:.3} (need 0.8) in {elapsed:.1}s",
            gt / n,
            heavy / n
        ),
    );
}

/// Data, SFT checkpoint and scorer for the default toy task, built once per test binary.
fn prepared_experiment() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-experiment");
        let _ = std::fs::remove_dir_all(&dir);
        let p = Pipeline::new(experiment(&dir, 0, &[]));
        p.make_data().unwrap();
        p.train_sft(false).unwrap();
        p.train_scorer().unwrap();
        dir
    })
}

fn experiment(dir: &Path, seed: u64, extra: &[&str]) -> ExperimentConfig {
    let mut overrides = vec![format!("output_dir={}", dir.display()), format!("seed={seed}")];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::resolve(None, &overrides).unwrap()
}

/// Centered moving average; the window shrinks at the ends.
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_7_rl_beats_weighted_sft() {
    let started = Instant::now();
    let dir = prepared_experiment();
    let seeds = 1..=5u64;
    let mut rhos = Vec::new();
    let mut score_gaps = Vec::new();
    let mut psnr_gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in seeds {
        let p = Pipeline::new(experiment(dir, seed, &[]));
        let rl = p.config().rl.clone();
        let full = p.run_rl_stage(&dir.join(format!("seed{seed}/rl")), rl.clone(), false).unwrap();
        let control = RlConfig {
            mode: TrainingMode::DiffSft,
            ..rl
        };
        let ctl = p.run_rl_stage(&dir.join(format!("seed{seed}/control")), control, false).unwrap();

        let curve: Vec<f64> = full.records.iter().map(|r| r.mean_reward).collect();
        let x: Vec<f64> = (0..curve.len()).map(|i| i as f64).collect();
        let rho = spearman(&smooth(&curve, 5), &x).unwrap();
        let (a, b): (&MetricsRecord, &MetricsRecord) = (full.records.last().unwrap(), ctl.records.last().unwrap());
        rhos.push(rho);
        score_gaps.push(a.quality_score - b.quality_score);
        psnr_gaps.push(a.psnr - b.psnr);
        lines.push(format!(
            "seed {seed}: rho {rho:.2}, score {:.3} vs {:.3}, PSNR {:.2} vs {:.2}",
            a.quality_score, b.quality_score, a.psnr, b.psnr
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let median_rho = median(rhos.clone());
    let curve_ok = median_rho > 0.8;
    let matches = mean(&score_gaps) >= 0.0 && mean(&psnr_gaps) >= 0.0;
    let median_exceeds = median(score_gaps.clone()) > 0.0 && median(psnr_gaps.clone()) > 0.0;
    let elapsed = started.elapsed().as_secs_f64();
    report(
        7,
        curve_ok && matches && median_exceeds && elapsed < 1800.0,
        format!(
            "median smoothed-curve rho {median_rho:.2} (need > 0.8); mean gap vs control score {:+.4}, PSNR {:+.3}; \
             median gap score {:+.4}, PSNR {:+.3}; {elapsed:.0}s [{}]",
            mean(&score_gaps),
            mean(&psnr_gaps),
            median(score_gaps.clone()),
            median(psnr_gaps.clone()),
            lines.join("; ")
        ),
    );
}

fn first_difference_variance(curve: &[f64]) -> f64 {
    let d: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn criterion_8_ablation_harness() {
    let started = Instant::now();
    let dir = prepared_experiment();
    let p = Pipeline::new(experiment(dir, 1, &["rl.iterations=10"]));
    let summary = p.ablate(&[], false).unwrap();
    let table = std::fs::read_to_string(&summary.table_path).unwrap();
    let completed = summary
        .runs
        .iter()
        .filter(|r| r.records.len() == 11 && r.dir.join(METRICS_FILE).exists())
        .count();
    let curve = |label: &str| -> Vec<f64> {
        let run = summary.runs.iter().find(|r| r.label == label).unwrap();
        run.records.iter().map(|r| r.mean_reward).collect()
    };
    let (iqa, recon) = (curve("full"), curve("reconstruction_reward"));
    let (v_iqa, v_recon) = (first_difference_variance(&iqa), first_difference_variance(&recon));
    let level = |c: &[f64]| (c.iter().sum::<f64>() / c.len() as f64).abs();
    let (s_iqa, s_recon) = (v_iqa / level(&iqa).powi(2), v_recon / level(&recon).powi(2));
    let elapsed = started.elapsed().as_secs_f64();
    report(
        8,
        completed == 8 && table.lines().count() == 3 + 8,
        format!(
            "{completed}/8 variant runs completed, table at {}; first-difference variance reconstruction {v_recon:.3e} \
             vs IQA {v_iqa:.3e} (raw {}), level-normalised {s_recon:.3e} vs {s_iqa:.3e} ({}) in {elapsed:.0}s",
            summary.table_path.display(),
            if v_recon > v_iqa { "higher" } else { "not higher" },
            if s_recon > s_iqa { "higher" } else { "not higher" },
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let started = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(tiny_experiment(a.path())).run_all(false).unwrap();
    Pipeline::new(tiny_experiment(b.path())).run_all(false).unwrap();
    let logs = ["rl", "eval"];
    let read = |root: &Path, stage: &str| -> Vec<u8> {
        let p = root.join(stage).join(if stage == "eval" { "metrics.json" } else { METRICS_FILE });
        std::fs::read(p).unwrap()
    };
    let identical = logs.iter().all(|s| read(a.path(), s) == read(b.path(), s));
    let elapsed = started.elapsed().as_secs_f64();
    report(
        9,
        identical,
        format!("two pinned-seed pipeline runs, metrics logs byte-identical: {identical} in {elapsed:.1}s"),
    );
}
