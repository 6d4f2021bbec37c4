//! Rewards, the proxy quality scorer and advantage normalization.

pub mod external;
pub mod scorer;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::Grid;

pub use external::{external_score, Endpoint, ExternalScorer, ExternalScorerConfig, SCORER_ENDPOINT_ENV};
pub use scorer::{
    iqa_reward, quality_features, refresh_scorer, severity_label, train_quality_scorer, ScorerConfig,
    ScorerExample, ScorerParams, SeverityCalibration,
};
pub use stats::{advantage, step_key, update_stats, RewardStats};

/// `-||x_hat - g||`: zero for a perfect reconstruction, negative otherwise.
pub fn reconstruction_reward(x_hat: &Grid, g: &Grid) -> Result<f64> {
    Ok(-x_hat.distance(g)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Reconstruction,
    Proxy,
    External,
}

impl std::str::FromStr for RewardKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Self::Reconstruction),
            "proxy" => Ok(Self::Proxy),
            "external" => Ok(Self::External),
            other => Err(crate::Error::Config(format!(
                "unknown reward backend {other:?} (expected reconstruction, proxy or external)"
            ))),
        }
    }
}

/// Scores a clean-image estimate; the estimate is clamped to `[0, 1]` first.
#[derive(Debug)]
pub enum RewardBackend {
    Reconstruction,
    Proxy(ScorerParams),
    External(ExternalScorer),
}

impl RewardBackend {
    pub fn kind(&self) -> RewardKind {
        match self {
            Self::Reconstruction => RewardKind::Reconstruction,
            Self::Proxy(_) => RewardKind::Proxy,
            Self::External(_) => RewardKind::External,
        }
    }

    pub fn score(&self, estimate: &Grid, reference: &Grid) -> Result<f64> {
        estimate.ensure_finite("reward input")?;
        let x = estimate.clamp01();
        match self {
            Self::Reconstruction => reconstruction_reward(&x, reference),
            Self::Proxy(s) => iqa_reward(s, &x),
            Self::External(s) => s.score(&x),
        }
    }
}
