//! Importance ratios, the clipped surrogate, the KL penalty and the combined loss.
//!
//! The policy mean is affine in the noise estimate, so every gradient here is
//! `d/d mean` scaled by [`mean_noise_coef`] and pushed through
//! [`ModelParams::backward`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    gaussian_log_density, mean_noise_coef, policy_log_prob, policy_mean, posterior_mean, x0_from_noise,
    LatentState, Trajectory, TrajectoryStep,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelParams;
use crate::schedule::{DiffusionSchedule, POLICY_VARIANCE_FLOOR};

/// `p_theta(action | x_t, c) / p_theta_old(action | x_t, c)` at a recorded step.
pub fn importance_ratio(
    params: &ModelParams,
    params_old: &ModelParams,
    step: &TrajectoryStep,
    cond: &Grid,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let new = policy_log_prob(params, &step.state, cond, &step.action.values, schedule)?;
    let old = policy_log_prob(params_old, &step.state, cond, &step.action.values, schedule)?;
    let r = (new - old).exp();
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("importance ratio at t = {}", step.state.t)));
    }
    Ok(r)
}

/// `(1 + eps) A` for non-negative advantages, `(1 - eps) A` otherwise.
pub fn clip_bound(clip_eps: f64, advantage: f64) -> f64 {
    if advantage >= 0.0 {
        (1.0 + clip_eps) * advantage
    } else {
        (1.0 - clip_eps) * advantage
    }
}

pub fn surrogate_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(clip_bound(clip_eps, advantage))
}

/// `d term / d log ratio`: `ratio * A` while the unclipped branch is the minimum, else 0.
pub fn surrogate_log_ratio_grad(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    if ratio * advantage < clip_bound(clip_eps, advantage) {
        ratio * advantage
    } else {
        0.0
    }
}

fn check_clip_eps(clip_eps: f64) -> Result<()> {
    if !(clip_eps > 0.0 && clip_eps < 1.0) {
        return Err(Error::invalid(format!("clip_eps must lie in (0, 1), got {clip_eps}")));
    }
    Ok(())
}

/// Sum of clipped surrogate terms over aligned ratios and advantages.
pub fn surrogate_value(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> Result<f64> {
    check_clip_eps(clip_eps)?;
    if ratios.len() != advantages.len() {
        return Err(Error::invalid(format!(
            "{} ratios but {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    Ok(ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| surrogate_term(r, a, clip_eps))
        .sum())
}

/// A recorded step with everything the old policy contributes cached.
#[derive(Debug, Clone)]
pub struct PolicyStep<'a> {
    /// Index of the batch sample this step belongs to.
    pub sample: usize,
    pub state: &'a LatentState,
    pub cond: &'a Grid,
    pub action: &'a Grid,
    pub advantage: f64,
    pub old_log_prob: f64,
    pub old_mean: Grid,
}

/// Evaluates the frozen policy once per recorded step.
///
/// `advantages[k][s]` belongs to step `s` of trajectory `k`, conditioned on `conds[k]`.
pub fn prepare_policy_steps<'a>(
    params_old: &ModelParams,
    trajectories: &'a [Trajectory],
    conds: &[&'a Grid],
    advantages: &[Vec<f64>],
    schedule: &DiffusionSchedule,
) -> Result<Vec<PolicyStep<'a>>> {
    if trajectories.len() != conds.len() || trajectories.len() != advantages.len() {
        return Err(Error::invalid("trajectories, conditions and advantages must align"));
    }
    let mut flat = Vec::new();
    for (k, tr) in trajectories.iter().enumerate() {
        if tr.steps.len() != advantages[k].len() {
            return Err(Error::invalid(format!(
                "trajectory {k} has {} steps but {} advantages",
                tr.steps.len(),
                advantages[k].len()
            )));
        }
        for (s, step) in tr.steps.iter().enumerate() {
            flat.push((k, step, advantages[k][s]));
        }
    }
    flat.par_iter()
        .map(|&(k, step, adv)| {
            let (old_mean, _) = policy_mean(params_old, &step.state, conds[k], schedule)?;
            let old_log_prob =
                gaussian_log_density(&step.action.values, &old_mean, schedule.policy_variance(step.state.t))?;
            Ok(PolicyStep {
                sample: k,
                state: &step.state,
                cond: conds[k],
                action: &step.action.values,
                advantage: adv,
                old_log_prob,
                old_mean,
            })
        })
        .collect()
}

struct StepEval {
    sample: usize,
    surrogate: f64,
    kl: f64,
    grads: Option<Vec<f64>>,
}

struct PassOutput {
    per_sample: Vec<f64>,
    kl_sum: f64,
    grads: Vec<f64>,
}

/// One forward/backward sweep over all steps computing the gradient of
/// `sum_i coef[sample_i] * surrogate_i + kl_coef * sum_i kl_i`.
fn policy_pass(
    params: &ModelParams,
    steps: &[PolicyStep<'_>],
    num_samples: usize,
    clip_eps: f64,
    schedule: &DiffusionSchedule,
    objective_coef: &[f64],
    kl_coef: f64,
) -> Result<PassOutput> {
    check_clip_eps(clip_eps)?;
    if let Some(s) = steps.iter().find(|s| s.sample >= num_samples) {
        return Err(Error::invalid(format!("step refers to sample {} of {num_samples}", s.sample)));
    }
    let evals: Vec<StepEval> = steps
        .par_iter()
        .map(|step| -> Result<StepEval> {
            let t = step.state.t;
            schedule.check_timestep(t)?;
            let var = schedule.policy_variance(t);
            if var < POLICY_VARIANCE_FLOOR {
                return Err(Error::DegenerateDensity(format!("policy variance {var} at t = {t}")));
            }
            let (eps, cache) = params.forward_cached(&step.state.values, step.cond, schedule.model_timestep(t))?;
            let x0 = x0_from_noise(&step.state.values, &eps, t, schedule);
            let mean = posterior_mean(&step.state.values, &x0, t, schedule);
            let log_prob = gaussian_log_density(step.action, &mean, var)?;
            let ratio = (log_prob - step.old_log_prob).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite(format!("importance ratio at t = {t}")));
            }
            let surrogate = surrogate_term(ratio, step.advantage, clip_eps);
            let kl = mean.squared_distance(&step.old_mean)? / (2.0 * var);

            let a = objective_coef[step.sample] * surrogate_log_ratio_grad(ratio, step.advantage, clip_eps);
            let grads = if a != 0.0 || (kl_coef != 0.0 && kl != 0.0) {
                let b = mean_noise_coef(t, schedule);
                let mut g_eps = Grid::zeros(mean.shape());
                for (((g, &m), &act), &old) in g_eps
                    .data_mut()
                    .iter_mut()
                    .zip(mean.data())
                    .zip(step.action.data())
                    .zip(step.old_mean.data())
                {
                    *g = b * (a * (act - m) + kl_coef * (m - old)) / var;
                }
                let mut g = params.zero_grad();
                params.backward(&cache, &g_eps, &mut g)?;
                Some(g)
            } else {
                None
            };
            Ok(StepEval {
                sample: step.sample,
                surrogate,
                kl,
                grads,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_sample = vec![0.0; num_samples];
    let mut kl_sum = 0.0;
    let mut grads = params.zero_grad();
    for e in evals {
        per_sample[e.sample] += e.surrogate;
        kl_sum += e.kl;
        if let Some(g) = e.grads {
            for (acc, v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
        }
    }
    Ok(PassOutput {
        per_sample,
        kl_sum,
        grads,
    })
}

/// Mean over samples of the per-trajectory summed clipped surrogate, and its gradient.
pub fn clipped_objective(
    params: &ModelParams,
    steps: &[PolicyStep<'_>],
    num_samples: usize,
    clip_eps: f64,
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    if num_samples == 0 {
        return Err(Error::EmptyBatch("clipped objective".into()));
    }
    let coef = vec![1.0 / num_samples as f64; num_samples];
    let out = policy_pass(params, steps, num_samples, clip_eps, schedule, &coef, 0.0)?;
    Ok((out.per_sample.iter().sum::<f64>() / num_samples as f64, out.grads))
}

/// `weight * mean_steps ||mu_theta - mu_old||^2 / (2 sigma_t^2)` and its gradient.
pub fn kl_penalty(
    params: &ModelParams,
    steps: &[PolicyStep<'_>],
    weight: f64,
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    if steps.is_empty() {
        return Err(Error::EmptyBatch("kl penalty".into()));
    }
    let n = steps.len() as f64;
    let num_samples = steps.iter().map(|s| s.sample + 1).max().unwrap_or(0);
    let coef = vec![0.0; num_samples];
    let out = policy_pass(params, steps, num_samples, 0.5, schedule, &coef, weight / n)?;
    Ok((weight * out.kl_sum / n, out.grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `sum_i (1 - w_i) L_diff,i`
    pub diff_term: f64,
    /// `-sum_i w_i J_i`
    pub rl_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip_eps: f64,
    pub kl_weight: f64,
}

/// Difficulty-mixed loss `sum (1 - w_i) L_diff,i - sum w_i J_i + L_KL` and its gradient.
///
/// `sft_terms[i]` is `(L_diff,i, grad)` for sample `i`; `J_i` sums the clipped
/// surrogate over the steps of sample `i`.
pub fn combined_loss(
    params: &ModelParams,
    sft_terms: &[(f64, Vec<f64>)],
    steps: &[PolicyStep<'_>],
    weights: &[f64],
    loss: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if sft_terms.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} diffusion-loss terms but {} weights",
            sft_terms.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::invalid(format!("difficulty weight {w} outside [0, 1]")));
    }
    let m = weights.len();
    let mut grads = params.zero_grad();
    let mut diff_term = 0.0;
    for ((l, g), &w) in sft_terms.iter().zip(weights) {
        if g.len() != grads.len() {
            return Err(Error::invalid("diffusion-loss gradient has the wrong length"));
        }
        diff_term += (1.0 - w) * l;
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += (1.0 - w) * v;
        }
    }
    let (mut rl_term, mut kl_term) = (0.0, 0.0);
    if !steps.is_empty() {
        let coef: Vec<f64> = weights.iter().map(|w| -w).collect();
        let n = steps.len() as f64;
        let out = policy_pass(params, steps, m, loss.clip_eps, schedule, &coef, loss.kl_weight / n)?;
        rl_term = -weights.iter().zip(&out.per_sample).map(|(w, j)| w * j).sum::<f64>();
        kl_term = loss.kl_weight * out.kl_sum / n;
        for (acc, v) in grads.iter_mut().zip(&out.grads) {
            *acc += v;
        }
    }
    Ok((
        LossBreakdown {
            diff_term,
            rl_term,
            kl_term,
            total: diff_term + rl_term + kl_term,
        },
        grads,
    ))
}
