//! Noise schedules for the forward process and the posterior coefficients the
//! reverse process needs.
//!
//! Timesteps are 1-based: `t` runs over `1..=T` and `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower bound applied to the policy variance so every reverse-step density is
/// defined, including the last step where the posterior variance is zero.
pub const POLICY_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    /// Timestep fed to the denoiser for each local step. Identity for a base
    /// schedule, the strided subsequence for a respaced one.
    model_timesteps: Vec<usize>,
}

pub fn build_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if num_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::invalid("beta bounds must be finite"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if num_steps == 1 {
                vec![beta_start]
            } else {
                let span = beta_end - beta_start;
                (0..num_steps)
                    .map(|i| beta_start + span * i as f64 / (num_steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            // Nichol & Dhariwal squared-cosine alpha_bar, betas clipped into the bounds.
            let s = 0.008;
            let f = |t: f64| ((t / num_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=num_steps)
                .map(|t| {
                    let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                    b.clamp(beta_start, beta_end)
                })
                .collect()
        }
    };
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let model_timesteps = (1..=betas.len()).collect();
        Self::with_model_timesteps(betas, model_timesteps)
    }

    fn with_model_timesteps(betas: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).max(0.0)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            model_timesteps,
        })
    }

    /// Strided sampling subsequence of `steps` timesteps ending at `T`.
    ///
    /// The result is itself a schedule over `1..=steps` whose cumulative products
    /// equal the base schedule's at the selected timesteps.
    pub fn respace(&self, steps: usize) -> Result<DiffusionSchedule> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        let picked: Vec<usize> = (1..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &picked {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_timesteps = picked.iter().map(|&t| self.model_timestep(t)).collect();
        Self::with_model_timesteps(betas, model_timesteps)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    /// Variance of the reverse-step Gaussian used as the policy.
    pub fn policy_variance(&self, t: usize) -> f64 {
        self.posterior_variance(t).max(POLICY_VARIANCE_FLOOR)
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t - 1]
    }

    pub fn model_timesteps(&self) -> &[usize] {
        &self.model_timesteps
    }

    /// Coefficients `(on x0, on x_t)` of the posterior mean of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        let c0 = self.beta(t) * ab_prev.sqrt() / denom;
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
        (c0, ct)
    }

    /// SHA-256 over the betas and model timesteps, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_steps() as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        for t in &self.model_timesteps {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_step_cumulative_product() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        // independent: 0.9, then 0.9 * 0.8
        assert_relative_eq!(s.alpha_bars()[0], 0.9, max_relative = 1e-12);
        assert_relative_eq!(s.alpha_bars()[1], 0.72, max_relative = 1e-12);
    }

    #[test]
    fn near_zero_beta_is_identity_process() {
        let s = build_schedule(1, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        assert_relative_eq!(s.alpha_bar(1), 1.0, epsilon = 1e-11);
    }

    #[test]
    fn linear_thousand_steps_matches_log_sum() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // oracle: exp(sum log(1 - beta)) accumulated in a compensated sum
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..1000 {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            let y = (-b).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle = sum.exp();
        assert_relative_eq!(s.alpha_bar(1000), oracle, max_relative = 1e-9);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() / 4.0e-5 < 0.01);
    }

    #[test]
    fn linear_betas_are_evenly_spaced() {
        let s = build_schedule(5, 0.1, 0.5, ScheduleKind::Linear).unwrap();
        for (i, b) in s.betas().iter().enumerate() {
            assert_relative_eq!(*b, 0.1 + 0.1 * i as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, f64::NAN, 0.2, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn invariants_hold_for_both_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = build_schedule(50, 1e-3, 0.2, kind).unwrap();
            let mut prod = 1.0;
            for t in 1..=50 {
                prod *= 1.0 - s.beta(t);
                assert_relative_eq!(s.alpha_bar(t), prod, max_relative = 1e-12);
                assert!(s.posterior_variance(t) >= 0.0);
                if t > 1 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn posterior_mean_is_identity_when_beta_vanishes() {
        let s = DiffusionSchedule::from_betas(vec![0.3, 1e-13]).unwrap();
        let (c0, ct) = s.posterior_mean_coefs(2);
        assert!(c0.abs() < 1e-11);
        assert_relative_eq!(ct, 1.0, epsilon = 1e-11);
    }

    #[test]
    fn respaced_schedule_keeps_selected_alpha_bars() {
        let base = build_schedule(50, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let sub = base.respace(10).unwrap();
        assert_eq!(sub.num_steps(), 10);
        assert_eq!(sub.model_timesteps(), &[5, 10, 15, 20, 25, 30, 35, 40, 45, 50]);
        for k in 1..=10 {
            assert_relative_eq!(sub.alpha_bar(k), base.alpha_bar(5 * k), max_relative = 1e-12);
        }
        assert_ne!(sub.hash(), base.hash());
    }

    #[test]
    fn final_step_policy_variance_is_floored() {
        let s = build_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert_eq!(s.policy_variance(1), POLICY_VARIANCE_FLOOR);
    }
}
