//! Per-sample difficulty weights from reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `||y_i - g_i|| / max_j ||y_j - g_j||`; all zeros when every error is zero.
pub fn difficulty_weights(outputs: &[Grid], ground_truths: &[Grid]) -> Result<Vec<f64>> {
    if outputs.is_empty() {
        return Err(Error::EmptyBatch("difficulty weights".into()));
    }
    if outputs.len() != ground_truths.len() {
        return Err(Error::invalid(format!(
            "{} outputs but {} ground truths",
            outputs.len(),
            ground_truths.len()
        )));
    }
    let errors: Vec<f64> = outputs
        .iter()
        .zip(ground_truths)
        .map(|(y, g)| y.distance(g))
        .collect::<Result<_>>()?;
    weights_from_errors(&errors)
}

pub fn weights_from_errors(errors: &[f64]) -> Result<Vec<f64>> {
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::invalid(format!("reconstruction error {e} is not a finite non-negative number")));
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![0.0; errors.len()]);
    }
    Ok(errors.iter().map(|e| e / max).collect())
}

/// One training sample with its inference output and difficulty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyItem {
    /// Index into the training pairs.
    pub pair: usize,
    pub output: Grid,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DifficultyBatch {
    pub items: Vec<DifficultyItem>,
}

impl DifficultyBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.weight).collect()
    }
}
