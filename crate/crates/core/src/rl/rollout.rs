//! Rollout collection under a frozen policy with per-step rewards.

use rayon::prelude::*;

use crate::diffusion::{sample_trajectory, Refinement, Trajectory};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelParams;
use crate::reward::RewardBackend;
use crate::rng;
use crate::schedule::DiffusionSchedule;

const ROLLOUT_TAG: u64 = 0x524f_4c4c;

/// One conditioning input and the reference its rewards are measured against.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    pub id: &'a str,
    pub cond: &'a Grid,
    pub reference: &'a Grid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub refinement: Refinement,
    /// Score only the last step; every earlier reward is 0.
    pub final_step_reward_only: bool,
}

/// Random stream of the `index`-th rollout in outer iteration `iteration`.
pub fn rollout_stream(iteration: u64, index: usize) -> u64 {
    rng::stream_id(&[ROLLOUT_TAG, iteration, index as u64])
}

/// Rewards each step of `trajectory` by scoring its clean-image estimate.
pub fn score_trajectory(
    trajectory: &mut Trajectory,
    reference: &Grid,
    backend: &RewardBackend,
    final_step_reward_only: bool,
) -> Result<()> {
    let last = trajectory.steps.len().saturating_sub(1);
    for (s, step) in trajectory.steps.iter_mut().enumerate() {
        step.reward = if final_step_reward_only && s != last {
            0.0
        } else {
            backend.score(&step.x0_prediction, reference).map_err(|e| match e {
                Error::RewardService(m) => Error::RewardService(format!("{} step {s}: {m}", trajectory.condition_id)),
                other => other,
            })?
        };
    }
    Ok(())
}

/// One trajectory per request under `params_old`, each on its own stream.
pub fn collect_rollouts(
    params_old: &ModelParams,
    requests: &[RolloutRequest<'_>],
    schedule: &DiffusionSchedule,
    backend: &RewardBackend,
    seed: u64,
    iteration: u64,
    options: RolloutOptions,
) -> Result<Vec<Trajectory>> {
    requests
        .par_iter()
        .enumerate()
        .map(|(k, req)| {
            let mut tr = sample_trajectory(
                params_old,
                req.cond,
                req.id,
                schedule,
                seed,
                rollout_stream(iteration, k),
                options.refinement,
            )?;
            score_trajectory(&mut tr, req.reference, backend, options.final_step_reward_only)?;
            Ok(tr)
        })
        .collect()
}
