//! Exact empirical optimal-transport cost between equal-size sets of images.
//!
//! With uniform weights on `n` points per side the optimal plan is a
//! permutation, so the transport value is the minimum-cost perfect matching,
//! solved here with the O(n^3) shortest-augmenting-path Hungarian method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Largest set size accepted by [`empirical_ot_cost`].
pub const MAX_OT_SET_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    /// Euclidean distance between flattened grids.
    #[default]
    L2,
}

/// Minimum-cost assignment for a square cost matrix; returns `(cost, row -> column)`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("assignment cost matrix must be square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    // 1-based potentials and matching, column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut match_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        match_col[0] = row;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < min_v[j] {
                        min_v[j] = cur;
                        way[j] = j0;
                    }
                    if min_v[j] < delta {
                        delta = min_v[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[match_col[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total, assignment))
}

pub fn pairwise_costs(set_a: &[Grid], set_b: &[Grid], cost: GroundCost) -> Result<Vec<Vec<f64>>> {
    match cost {
        GroundCost::L2 => set_a
            .iter()
            .map(|a| set_b.iter().map(|b| a.distance(b)).collect())
            .collect(),
    }
}

/// Minimum total ground cost over perfect matchings between the two sets.
pub fn empirical_ot_cost(set_a: &[Grid], set_b: &[Grid], cost: GroundCost) -> Result<f64> {
    if set_a.len() != set_b.len() {
        return Err(Error::invalid(format!(
            "optimal transport needs equal set sizes, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    if set_a.len() > MAX_OT_SET_SIZE {
        return Err(Error::invalid(format!(
            "set size {} exceeds the cap of {MAX_OT_SET_SIZE}",
            set_a.len()
        )));
    }
    let matrix = pairwise_costs(set_a, set_b, cost)?;
    solve_assignment(&matrix).map(|(c, _)| c)
}
