//! Supervised noise-prediction loss (the diffusion loss).

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ModelParams;
use crate::optim::{apply_update, OptimizerConfig, OptimizerState};
use crate::schedule::DiffusionSchedule;

/// One supervised example with its noise draw fixed.
#[derive(Debug, Clone)]
pub struct SftDraw<'a> {
    pub x0: &'a Grid,
    pub cond: &'a Grid,
    pub t: usize,
    pub noise: Grid,
}

/// Draws `(t, noise)` for each `(x0, cond)` pair in order.
pub fn draw_sft_batch<'a, R: Rng + ?Sized>(
    batch: &[(&'a Grid, &'a Grid)],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Vec<SftDraw<'a>> {
    batch
        .iter()
        .map(|(x0, cond)| {
            let t = rng.random_range(1..=schedule.num_steps());
            let noise = Grid::standard_normal(x0.shape(), rng);
            SftDraw { x0, cond, t, noise }
        })
        .collect()
}

/// Per-sample mean squared noise error and its parameter gradient.
pub fn sft_sample_terms(
    params: &ModelParams,
    draws: &[SftDraw<'_>],
    schedule: &DiffusionSchedule,
) -> Result<Vec<(f64, Vec<f64>)>> {
    draws
        .par_iter()
        .map(|d| {
            let xt = forward_sample(d.x0, d.t, &d.noise, schedule)?;
            let (pred, cache) = params.forward_cached(&xt.values, d.cond, schedule.model_timestep(d.t))?;
            let n = pred.len() as f64;
            let resid = pred.zip_map(&d.noise, |p, e| p - e);
            let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / n;
            let upstream = resid.map(|r| 2.0 * r / n);
            let mut grads = params.zero_grad();
            params.backward(&cache, &upstream, &mut grads)?;
            Ok((loss, grads))
        })
        .collect()
}

/// Batch-mean diffusion loss for fixed draws.
pub fn sft_loss_with_draws(
    params: &ModelParams,
    draws: &[SftDraw<'_>],
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    if draws.is_empty() {
        return Err(Error::EmptyBatch("sft batch".into()));
    }
    let terms = sft_sample_terms(params, draws, schedule)?;
    let m = terms.len() as f64;
    let mut grads = params.zero_grad();
    let mut loss = 0.0;
    for (l, g) in &terms {
        loss += l / m;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi / m;
        }
    }
    Ok((loss, grads))
}

/// Draws a timestep and noise per pair, then returns the mean loss and gradient.
pub fn sft_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[(&Grid, &Grid)],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("sft batch".into()));
    }
    let draws = draw_sft_batch(batch, schedule, rng);
    sft_loss_with_draws(params, &draws, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            optimizer: OptimizerConfig {
                max_grad_norm: Some(1.0),
                ..OptimizerConfig::adam(2e-3)
            },
        }
    }
}

/// Runs `config.steps` minibatch updates and returns the loss of each one.
///
/// Each step draws `batch_size` distinct pairs, then a timestep and noise per pair,
/// all from `rng`.
pub fn train_sft<R: Rng + ?Sized>(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    pairs: &[(&Grid, &Grid)],
    schedule: &DiffusionSchedule,
    config: &SftConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if pairs.is_empty() || config.batch_size == 0 {
        return Err(Error::EmptyBatch("sft training set".into()));
    }
    let mut losses = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let picks = sample_indices(rng, pairs.len(), config.batch_size.min(pairs.len()));
        let batch: Vec<(&Grid, &Grid)> = picks.iter().map(|i| pairs[i]).collect();
        let (loss, grads) = sft_loss(params, &batch, schedule, rng)?;
        apply_update(params.values_mut(), &grads, optimizer, &config.optimizer)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::model::{init_model, ArchConfig};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn setup() -> (ModelParams, DiffusionSchedule, Vec<Grid>) {
        let arch = ArchConfig { channels: 1, width: 4, depth: 1, time_embed_dim: 4 };
        let params = init_model(arch, &mut crate::rng::stream(1, 0)).unwrap();
        let sched = build_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut r = crate::rng::stream(1, 1);
        let grids = (0..6).map(|_| Grid::standard_normal(Shape::new(1, 4, 4), &mut r)).collect();
        (params, sched, grids)
    }

    #[test]
    fn empty_batch_rejected() {
        let (p, s, _) = setup();
        assert!(matches!(sft_loss(&p, &[], &s, &mut crate::rng::stream(0, 0)), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn order_invariance() {
        let (p, s, g) = setup();
        let pairs: Vec<(&Grid, &Grid)> = vec![(&g[0], &g[1]), (&g[2], &g[3]), (&g[4], &g[5])];
        let draws = draw_sft_batch(&pairs, &s, &mut crate::rng::stream(2, 0));
        let (a, ga) = sft_loss_with_draws(&p, &draws, &s).unwrap();
        let rev: Vec<SftDraw> = draws.iter().rev().cloned().collect();
        let (b, gb) = sft_loss_with_draws(&p, &rev, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn training_lowers_loss() {
        let (mut p, s, g) = setup();
        let pairs: Vec<(&Grid, &Grid)> = vec![(&g[0], &g[1]), (&g[2], &g[3]), (&g[4], &g[5])];
        let cfg = SftConfig { steps: 200, batch_size: 3, optimizer: crate::optim::OptimizerConfig::adam(1e-2) };
        let mut opt = OptimizerState::new(p.param_count());
        let losses = train_sft(&mut p, &mut opt, &pairs, &s, &cfg, &mut crate::rng::stream(4, 0)).unwrap();
        let head: f64 = losses[..20].iter().sum();
        let tail: f64 = losses[180..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(opt.step, 200);
    }

    #[test]
    fn deterministic_given_rng() {
        let (p, s, g) = setup();
        let pairs: Vec<(&Grid, &Grid)> = vec![(&g[0], &g[1]), (&g[2], &g[3])];
        let a = sft_loss(&p, &pairs, &s, &mut crate::rng::stream(3, 0)).unwrap();
        let b = sft_loss(&p, &pairs, &s, &mut crate::rng::stream(3, 0)).unwrap();
        assert_eq!(a, b);
    }
}
