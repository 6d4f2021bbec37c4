//! Forward noising, the Gaussian reverse-step policy and trajectory recording.
//!
//! A reverse step from `x_t` is the action of a one-step MDP: the state is
//! `(x_t, c, t)`, the action is the next latent, and the transition installs the
//! action as the next state. Log-densities are exact and summed over every grid
//! element.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelParams;
use crate::schedule::DiffusionSchedule;

/// Anything that predicts the injected noise of `x_t`.
pub trait Denoiser: Sync {
    fn predict_noise(&self, x_t: &Grid, cond: &Grid, model_t: usize) -> Result<Grid>;
}

impl Denoiser for ModelParams {
    fn predict_noise(&self, x_t: &Grid, cond: &Grid, model_t: usize) -> Result<Grid> {
        self.forward(x_t, cond, model_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub values: Grid,
    pub t: usize,
}

impl LatentState {
    pub fn new(values: Grid, t: usize) -> Result<Self> {
        values.ensure_finite("latent state")?;
        Ok(Self { values, t })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: LatentState,
    pub condition_id: String,
    pub action: LatentState,
    /// `log pi(action | state)` under the parameters that sampled it.
    pub log_prob: f64,
    pub reward: f64,
    /// Unclamped clean-image estimate decoded from the action.
    pub x0_prediction: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_output: Grid,
    pub condition_id: String,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Final output clamped to the image range.
    pub fn output_image(&self) -> Grid {
        self.final_output.clamp01()
    }
}

/// How many extra denoiser passes refine each action; 0 is the plain reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub iterations: usize,
}

impl Refinement {
    pub const NONE: Refinement = Refinement { iterations: 0 };
    pub const ONE: Refinement = Refinement { iterations: 1 };
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_sample(x0: &Grid, t: usize, noise: &Grid, schedule: &DiffusionSchedule) -> Result<LatentState> {
    x0.ensure_same_shape(noise)?;
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentState {
        values: x0.zip_map(noise, |x, n| a * x + b * n),
        t,
    })
}

/// Clean-image estimate from a noise estimate (no clamping).
pub fn x0_from_noise(x_t: &Grid, eps_hat: &Grid, t: usize, schedule: &DiffusionSchedule) -> Grid {
    let ab = schedule.alpha_bar(t);
    let (inv, s) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - s * e) * inv)
}

/// `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`; `clamp` maps into `[0, 1]` for scoring.
pub fn predict_x0<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    schedule: &DiffusionSchedule,
    clamp: bool,
) -> Result<Grid> {
    if x_t.t == 0 {
        return Err(Error::invalid("predict_x0 at t = 0: nothing left to denoise"));
    }
    schedule.check_timestep(x_t.t)?;
    let eps = model.predict_noise(&x_t.values, cond, schedule.model_timestep(x_t.t))?;
    let x0 = x0_from_noise(&x_t.values, &eps, x_t.t, schedule);
    Ok(if clamp { x0.clamp01() } else { x0 })
}

/// Posterior mean of `q(x_{t-1} | x_t, x0_hat)`.
pub fn posterior_mean(x_t: &Grid, x0_hat: &Grid, t: usize, schedule: &DiffusionSchedule) -> Grid {
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    x0_hat.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt)
}

/// `d mean / d eps_hat` of the policy mean at step `t` (the mean is affine in the noise estimate).
pub fn mean_noise_coef(t: usize, schedule: &DiffusionSchedule) -> f64 {
    let ab = schedule.alpha_bar(t);
    let (c0, _) = schedule.posterior_mean_coefs(t);
    -c0 * (1.0 - ab).sqrt() / ab.sqrt()
}

/// Mean of `p_theta(x_{t-1} | x_t, c)` together with the raw noise estimate.
pub fn policy_mean<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    schedule: &DiffusionSchedule,
) -> Result<(Grid, Grid)> {
    schedule.check_timestep(x_t.t)?;
    x_t.values.ensure_same_shape(cond)?;
    let eps = model.predict_noise(&x_t.values, cond, schedule.model_timestep(x_t.t))?;
    let x0 = x0_from_noise(&x_t.values, &eps, x_t.t, schedule);
    Ok((posterior_mean(&x_t.values, &x0, x_t.t, schedule), eps))
}

/// Log-density of an isotropic Gaussian, summed over all elements.
pub fn gaussian_log_density(x: &Grid, mean: &Grid, variance: f64) -> Result<f64> {
    x.ensure_same_shape(mean)?;
    if !(variance > 0.0) {
        return Err(Error::DegenerateDensity(format!("variance {variance}")));
    }
    let d = x.len() as f64;
    let sq = x.squared_distance(mean)?;
    let lp = -0.5 * sq / variance - 0.5 * d * (2.0 * std::f64::consts::PI * variance).ln();
    if !lp.is_finite() {
        return Err(Error::NonFinite("log density".into()));
    }
    Ok(lp)
}

/// `log p_theta(action | x_t, c)` for a recorded action.
pub fn policy_log_prob<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    action: &Grid,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    let (mean, _) = policy_mean(model, x_t, cond, schedule)?;
    gaussian_log_density(action, &mean, schedule.policy_variance(x_t.t))
}

/// Output of one policy step before it is packed into a [`TrajectoryStep`].
#[derive(Debug, Clone)]
pub struct StepSample {
    pub action: LatentState,
    pub log_prob: f64,
    /// Clean-image estimate at the input state from the first pass.
    pub x0_at_state: Grid,
}

fn policy_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    refinement: Refinement,
) -> Result<StepSample> {
    if x_t.t == 0 {
        return Err(Error::invalid("reverse step from t = 0"));
    }
    schedule.check_timestep(x_t.t)?;
    x_t.values.ensure_same_shape(cond)?;
    let t = x_t.t;
    let eps = model.predict_noise(&x_t.values, cond, schedule.model_timestep(t))?;
    let x0 = x0_from_noise(&x_t.values, &eps, t, schedule);
    let mean = posterior_mean(&x_t.values, &x0, t, schedule);
    let variance = schedule.policy_variance(t);
    if !(variance > 0.0) {
        return Err(Error::DegenerateDensity(format!("zero policy variance at t = {t}")));
    }
    let sigma = variance.sqrt();
    let noise = Grid::standard_normal(mean.shape(), rng);
    let mut action = mean.zip_map(&noise, |m, z| m + sigma * z);

    // The last step lands on t = 0, where there is no further pass to refine with.
    if t > 1 {
        for _ in 0..refinement.iterations {
            let eps2 = model.predict_noise(&action, cond, schedule.model_timestep(t - 1))?;
            let x0_refined = x0_from_noise(&action, &eps2, t - 1, schedule);
            let refined_mean = posterior_mean(&x_t.values, &x0_refined, t, schedule);
            action = refined_mean.zip_map(&noise, |m, z| m + sigma * z);
        }
    }
    action.ensure_finite("sampled action")?;
    let log_prob = gaussian_log_density(&action, &mean, variance)?;
    Ok(StepSample {
        action: LatentState { values: action, t: t - 1 },
        log_prob,
        x0_at_state: x0,
    })
}

/// Samples `x_{t-1} ~ N(mu_theta(x_t, t, c), sigma_t^2 I)` and returns its log-density.
pub fn reverse_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(LatentState, f64)> {
    policy_step(model, x_t, cond, schedule, rng, Refinement::NONE).map(|s| (s.action, s.log_prob))
}

/// Reverse step followed by `refinement.iterations` extra denoiser passes on the
/// sampled latent. Each pass refreshes the clean estimate and recomputes the
/// posterior mean from `x_t`, re-adding the same noise draw. The log-density is
/// evaluated at the refined point under the original policy `p_theta(. | x_t, c)`.
pub fn refined_action<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_t: &LatentState,
    cond: &Grid,
    schedule: &DiffusionSchedule,
    rng: &mut R,
    refinement: Refinement,
) -> Result<(LatentState, f64)> {
    policy_step(model, x_t, cond, schedule, rng, refinement).map(|s| (s.action, s.log_prob))
}

/// Rolls the reverse chain from `x_T ~ N(0, I)` down to `x_0`.
///
/// `seed`/`stream` identify the random stream so the rollout can be replayed.
pub fn sample_trajectory<D: Denoiser + ?Sized>(
    model: &D,
    cond: &Grid,
    condition_id: &str,
    schedule: &DiffusionSchedule,
    seed: u64,
    stream: u64,
    refinement: Refinement,
) -> Result<Trajectory> {
    let mut rng = crate::rng::stream(seed, stream);
    let total = schedule.num_steps();
    let mut state = LatentState {
        values: Grid::standard_normal(cond.shape(), &mut rng),
        t: total,
    };
    let mut steps: Vec<TrajectoryStep> = Vec::with_capacity(total);
    for _ in 0..total {
        let sample = policy_step(model, &state, cond, schedule, &mut rng, refinement)?;
        // The first pass at this state decodes the previous action.
        if let Some(prev) = steps.last_mut() {
            prev.x0_prediction = sample.x0_at_state.clone();
        }
        steps.push(TrajectoryStep {
            state: state.clone(),
            condition_id: condition_id.to_string(),
            action: sample.action.clone(),
            log_prob: sample.log_prob,
            reward: 0.0,
            x0_prediction: Grid::zeros(cond.shape()),
        });
        state = sample.action;
    }
    let final_output = state.values;
    if let Some(last) = steps.last_mut() {
        last.x0_prediction = final_output.clone();
    }
    Ok(Trajectory {
        steps,
        final_output,
        condition_id: condition_id.to_string(),
        seed,
        stream,
    })
}

/// Re-evaluates `log p_theta(action | state)` for every recorded step.
pub fn replay_log_probs<D: Denoiser + ?Sized>(
    model: &D,
    trajectory: &Trajectory,
    cond: &Grid,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    trajectory
        .steps
        .iter()
        .map(|s| policy_log_prob(model, &s.state, cond, &s.action.values, schedule))
        .collect()
}

/// Deterministic sample used for evaluation-time inference.
pub fn restore<D: Denoiser + ?Sized>(
    model: &D,
    cond: &Grid,
    schedule: &DiffusionSchedule,
    seed: u64,
    stream: u64,
    refinement: Refinement,
) -> Result<Grid> {
    let mut rng = crate::rng::stream(seed, stream);
    let mut state = LatentState {
        values: Grid::standard_normal(cond.shape(), &mut rng),
        t: schedule.num_steps(),
    };
    while state.t > 0 {
        state = policy_step(model, &state, cond, schedule, &mut rng, refinement)?.action;
    }
    Ok(state.values.clamp01())
}
