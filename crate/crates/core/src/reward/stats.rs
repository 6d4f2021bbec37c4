//! Running reward statistics and normalized advantages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponentially decayed mean and variance of one reward stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardStats {
    track: BTreeMap<String, TrackEntry>,
    batch: Vec<f64>,
    /// Added to the pooled variance before the square root.
    pub eps_var: f64,
    /// Weight of the per-key track against the batch statistics.
    pub mix: f64,
    /// Weight kept by the running mean at each update; 1 freezes the first observation.
    pub decay: f64,
}

impl Default for RewardStats {
    fn default() -> Self {
        Self {
            track: BTreeMap::new(),
            batch: Vec::new(),
            eps_var: 1e-8,
            mix: 0.5,
            decay: 0.9,
        }
    }
}

impl RewardStats {
    pub fn new(eps_var: f64, mix: f64, decay: f64) -> Result<Self> {
        if !(eps_var > 0.0 && eps_var.is_finite()) {
            return Err(Error::invalid(format!("eps_var must be positive, got {eps_var}")));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::invalid(format!("mix must lie in [0, 1], got {mix}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1], got {decay}")));
        }
        Ok(Self {
            eps_var,
            mix,
            decay,
            ..Self::default()
        })
    }

    pub fn track(&self, key: &str) -> Option<&TrackEntry> {
        self.track.get(key)
    }

    pub fn batch(&self) -> &[f64] {
        &self.batch
    }

    /// Folds `rewards` into the track of `key`, oldest first.
    pub fn observe(&mut self, key: &str, rewards: &[f64]) -> Result<()> {
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward {r} for {key}")));
        }
        for &r in rewards {
            match self.track.get_mut(key) {
                None => {
                    self.track.insert(
                        key.to_string(),
                        TrackEntry {
                            mean: r,
                            variance: 0.0,
                            count: 1,
                        },
                    );
                }
                Some(e) => {
                    let diff = r - e.mean;
                    let incr = (1.0 - self.decay) * diff;
                    e.mean += incr;
                    e.variance = self.decay * (e.variance + diff * incr);
                    e.count += 1;
                }
            }
        }
        Ok(())
    }

    pub fn set_batch(&mut self, rewards: Vec<f64>) -> Result<()> {
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("batch reward {r}")));
        }
        self.batch = rewards;
        Ok(())
    }

    /// Batch mean and population variance.
    pub fn batch_moments(&self) -> Result<(f64, f64)> {
        if self.batch.is_empty() {
            return Err(Error::EmptyBatch("reward batch buffer".into()));
        }
        let n = self.batch.len() as f64;
        let mean = self.batch.iter().sum::<f64>() / n;
        let var = self.batch.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok((mean, var))
    }

    /// Baseline mean and variance for `key`: track and batch pooled by `mix`,
    /// or batch only when `key` has no track yet.
    pub fn baseline(&self, key: &str) -> Result<(f64, f64)> {
        let (bm, bv) = self.batch_moments()?;
        Ok(match self.track.get(key) {
            Some(e) => (
                self.mix * e.mean + (1.0 - self.mix) * bm,
                self.mix * e.variance + (1.0 - self.mix) * bv,
            ),
            None => (bm, bv),
        })
    }
}

/// Updates the track of `image_id` with `new_rewards` and makes them the batch buffer.
pub fn update_stats(mut stats: RewardStats, image_id: &str, new_rewards: &[f64]) -> Result<RewardStats> {
    stats.observe(image_id, new_rewards)?;
    stats.set_batch(new_rewards.to_vec())?;
    Ok(stats)
}

/// `(reward - mu) / sqrt(var + eps_var)` with the pooled baseline of `image_id`.
pub fn advantage(reward: f64, stats: &RewardStats, image_id: &str) -> Result<f64> {
    let (mu, var) = stats.baseline(image_id)?;
    let a = (reward - mu) / (var + stats.eps_var).sqrt();
    if !a.is_finite() {
        return Err(Error::NonFinite(format!("advantage for {image_id}")));
    }
    Ok(a)
}

/// Track key for the reward stream of one image at one reverse step.
pub fn step_key(image_id: &str, step: usize) -> String {
    format!("{image_id}/{step}")
}
