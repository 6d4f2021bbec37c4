//! The outer RL fine-tuning loop and its evaluation pass.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench::RestorationPair;
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::diffusion::{restore, Refinement};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{
    empirical_ot_cost, frechet_proxy, psnr, ssim, GroundCost, MetricsRecord, RunStore, SsimWindow, TaskMetrics,
};
use crate::model::ModelParams;
use crate::optim::{apply_update, OptimizerConfig};
use crate::reward::{
    iqa_reward, refresh_scorer, scorer::scorer_examples, step_key, RewardBackend, RewardStats, ScorerConfig,
    ScorerParams, SeverityCalibration,
};
use crate::rl::difficulty::difficulty_weights;
use crate::rl::objective::{combined_loss, prepare_policy_steps, LossBreakdown, LossWeights};
use crate::rl::rollout::{collect_rollouts, rollout_stream, RolloutOptions, RolloutRequest};
use crate::rng::{self, RngState, StreamRng};
use crate::schedule::DiffusionSchedule;
use crate::sft::{draw_sft_batch, sft_sample_terms};

const SESSION_TAG: u64 = 0x524c_5452;
const EVAL_TAG: u64 = 0x4556_414c;

pub const RL_STAGE: &str = "rl";
pub const DIFF_SFT_STAGE: &str = "diff_sft";

/// Switches for the ablation variants. All `false` is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Reward is the negative distance to the reference instead of the scorer output.
    pub reconstruction_reward: bool,
    /// Every difficulty weight is 1.
    pub uniform_weights: bool,
    /// Use the plain reverse-step sample as the action.
    pub unrefined_action: bool,
    pub final_step_reward_only: bool,
    /// Normalize with the per-key track only (mix = 1).
    pub track_only_norm: bool,
    /// Periodically relabel model outputs and fine-tune the proxy scorer.
    pub iterative_scorer_refresh: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "reconstruction_reward",
        "uniform_weights",
        "unrefined_action",
        "final_step_reward_only",
        "track_only_norm",
        "iterative_scorer_refresh",
    ];

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "reconstruction_reward" => &mut self.reconstruction_reward,
            "uniform_weights" => &mut self.uniform_weights,
            "unrefined_action" => &mut self.unrefined_action,
            "final_step_reward_only" => &mut self.final_step_reward_only,
            "track_only_norm" => &mut self.track_only_norm,
            "iterative_scorer_refresh" => &mut self.iterative_scorer_refresh,
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Each step is normalized from its own reward.
    #[default]
    PerStep,
    /// Every step of a trajectory shares the advantage of the summed reward.
    TrajectorySum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Rl,
    /// Difficulty-weighted diffusion loss only, with the same update schedule.
    DiffSft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub mode: TrainingMode,
    pub iterations: u64,
    pub batch_size: usize,
    pub inner_epochs: usize,
    /// Outer iterations between refreshes of the frozen policy.
    pub old_refresh_every: u64,
    pub clip_eps: f64,
    pub kl_weight: f64,
    pub norm_mix: f64,
    pub norm_eps_var: f64,
    pub track_decay: f64,
    pub advantage_mode: AdvantageMode,
    pub ablation: AblationFlags,
    pub scorer_refresh_every: u64,
    pub optimizer: OptimizerConfig,
    /// Held-out pairs evaluated after every iteration.
    pub eval_size: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Rl,
            iterations: 30,
            batch_size: 8,
            inner_epochs: 2,
            old_refresh_every: 1,
            clip_eps: 0.2,
            kl_weight: 0.01,
            norm_mix: 0.5,
            norm_eps_var: 1e-8,
            track_decay: 0.9,
            advantage_mode: AdvantageMode::PerStep,
            ablation: AblationFlags::default(),
            scorer_refresh_every: 10,
            optimizer: OptimizerConfig {
                max_grad_norm: Some(1.0),
                ..OptimizerConfig::adam(1e-4)
            },
            eval_size: 16,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.inner_epochs == 0 || self.old_refresh_every == 0 {
            return Err(Error::Config("batch_size, inner_epochs and old_refresh_every must be positive".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps)));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config("kl_weight must be a non-negative number".into()));
        }
        if self.ablation.iterative_scorer_refresh && self.scorer_refresh_every == 0 {
            return Err(Error::Config("scorer_refresh_every must be positive".into()));
        }
        RewardStats::new(self.norm_eps_var, self.norm_mix, self.track_decay).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn refinement(&self) -> Refinement {
        if self.ablation.unrefined_action {
            Refinement::NONE
        } else {
            Refinement::ONE
        }
    }

    pub fn effective_mix(&self) -> f64 {
        if self.ablation.track_only_norm {
            1.0
        } else {
            self.norm_mix
        }
    }

    fn stage(&self) -> &'static str {
        match self.mode {
            TrainingMode::Rl => RL_STAGE,
            TrainingMode::DiffSft => DIFF_SFT_STAGE,
        }
    }
}

/// Read-only data shared by every iteration.
#[derive(Debug, Clone, Copy)]
pub struct RlInputs<'a> {
    pub train: &'a [RestorationPair],
    pub eval: &'a [RestorationPair],
    /// Full schedule the diffusion loss draws timesteps from.
    pub sft_schedule: &'a DiffusionSchedule,
    /// Sampling subsequence used for rollouts and evaluation.
    pub sampling_schedule: &'a DiffusionSchedule,
    /// Fixed scorer behind the logged quality score.
    pub quality_scorer: &'a ScorerParams,
    pub scorer_config: &'a ScorerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u64,
    pub mean_rollout_reward: f64,
    pub mean_weight: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeState {
    iteration: u64,
    reward_stats: RewardStats,
    scorer: Option<ScorerParams>,
}

/// Batch indices for one iteration, drawn without replacement.
pub fn select_batch(rng: &mut StreamRng, available: usize, batch_size: usize) -> Vec<usize> {
    sample_indices(rng, available, batch_size.min(available)).into_vec()
}

pub fn session_rng(seed: u64) -> StreamRng {
    rng::stream(seed, rng::stream_id(&[SESSION_TAG]))
}

pub fn eval_stream(index: usize) -> u64 {
    rng::stream_id(&[EVAL_TAG, index as u64])
}

/// Restores every pair and reports fidelity, distribution and score metrics.
pub fn evaluate_model(
    params: &ModelParams,
    pairs: &[RestorationPair],
    schedule: &DiffusionSchedule,
    seed: u64,
    backend: Option<&RewardBackend>,
    quality_scorer: &ScorerParams,
    iteration: u64,
) -> Result<MetricsRecord> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("evaluation set".into()));
    }
    let outputs: Vec<Grid> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, p)| restore(params, &p.degraded, schedule, seed, eval_stream(k), Refinement::NONE))
        .collect::<Result<_>>()?;
    score_outputs(&outputs, pairs, backend, quality_scorer, iteration)
}

/// Metrics of fixed `outputs` against the references of `pairs`.
///
/// `mean_reward` comes from `backend` when given, otherwise from the quality scorer.
pub fn score_outputs(
    outputs: &[Grid],
    pairs: &[RestorationPair],
    backend: Option<&RewardBackend>,
    quality_scorer: &ScorerParams,
    iteration: u64,
) -> Result<MetricsRecord> {
    if pairs.is_empty() || outputs.len() != pairs.len() {
        return Err(Error::invalid(format!("{} outputs for {} pairs", outputs.len(), pairs.len())));
    }
    let window = SsimWindow::default();
    let n = pairs.len() as f64;
    let mut by_task: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let (mut psnr_sum, mut ssim_sum, mut score_sum, mut reward_sum) = (0.0, 0.0, 0.0, 0.0);
    for (y, p) in outputs.iter().zip(pairs) {
        let (ps, ss) = (psnr(y, &p.gt, 1.0)?, ssim(y, &p.gt, &window)?);
        psnr_sum += ps;
        ssim_sum += ss;
        score_sum += iqa_reward(quality_scorer, y)?;
        if let Some(b) = backend {
            reward_sum += b.score(y, &p.gt)?;
        }
        let e = by_task.entry(p.task.to_string()).or_insert((0.0, 0.0, 0));
        e.0 += ps;
        e.1 += ss;
        e.2 += 1;
    }
    let gts: Vec<Grid> = pairs.iter().map(|p| p.gt.clone()).collect();
    Ok(MetricsRecord {
        iteration,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        frechet_proxy: frechet_proxy(outputs, &gts)?,
        ot_cost: empirical_ot_cost(outputs, &gts, GroundCost::L2)?,
        mean_reward: if backend.is_some() { reward_sum / n } else { score_sum / n },
        quality_score: score_sum / n,
        per_task: by_task
            .into_iter()
            .map(|(k, (p, s, c))| {
                (
                    k,
                    TaskMetrics {
                        psnr: p / c as f64,
                        ssim: s / c as f64,
                    },
                )
            })
            .collect(),
    })
}

/// Mutable state of one fine-tuning run.
pub struct RlTrainer<'a> {
    inputs: RlInputs<'a>,
    config: RlConfig,
    params: ModelParams,
    params_old: ModelParams,
    optimizer: crate::optim::OptimizerState,
    stats: RewardStats,
    rng: StreamRng,
    iteration: u64,
    backend: RewardBackend,
    calibration: Option<SeverityCalibration>,
    base_config: Value,
    schedule_hash: String,
}

impl<'a> RlTrainer<'a> {
    /// Starts from an SFT checkpoint, or resumes an RL checkpoint written by this loop.
    pub fn new(inputs: RlInputs<'a>, config: RlConfig, start: &Checkpoint, backend: RewardBackend) -> Result<Self> {
        config.validate()?;
        if inputs.train.is_empty() {
            return Err(Error::EmptyBatch("RL training pairs".into()));
        }
        let backend = if config.ablation.reconstruction_reward {
            RewardBackend::Reconstruction
        } else {
            backend
        };
        if config.ablation.iterative_scorer_refresh && !matches!(backend, RewardBackend::Proxy(_)) {
            return Err(Error::Config("iterative scorer refresh needs the proxy reward backend".into()));
        }
        let calibration = if config.ablation.iterative_scorer_refresh {
            Some(SeverityCalibration::from_pairs(inputs.train)?)
        } else {
            None
        };
        let mut stats = RewardStats::new(config.norm_eps_var, config.effective_mix(), config.track_decay)?;
        let mut backend = backend;
        let mut rng = session_rng(inputs.seed);
        let mut iteration = 0;
        let mut optimizer = crate::optim::OptimizerState::new(start.params.param_count());
        if start.stage == config.stage() {
            let resume: ResumeState = serde_json::from_value(start.aux.clone())
                .map_err(|e| Error::Format(format!("bad resume state in checkpoint: {e}")))?;
            iteration = resume.iteration;
            stats = resume.reward_stats;
            if let (Some(s), RewardBackend::Proxy(current)) = (resume.scorer, &mut backend) {
                *current = s;
            }
            rng = start
                .rng
                .restore()
                .ok_or_else(|| Error::Format("unreadable rng state in checkpoint".into()))?;
            optimizer = start.optimizer.clone();
        }
        Ok(Self {
            inputs,
            params_old: start.params.clone(),
            params: start.params.clone(),
            optimizer,
            stats,
            rng,
            iteration,
            backend,
            calibration,
            base_config: serde_json::to_value(&config)?,
            schedule_hash: inputs.sampling_schedule.hash(),
            config,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn backend(&self) -> &RewardBackend {
        &self.backend
    }

    pub fn reward_stats(&self) -> &RewardStats {
        &self.stats
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let n = self.config.eval_size.min(self.inputs.eval.len());
        evaluate_model(
            &self.params,
            &self.inputs.eval[..n],
            self.inputs.sampling_schedule,
            self.inputs.seed,
            Some(&self.backend),
            self.inputs.quality_scorer,
            self.iteration,
        )
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let scorer = match (&self.backend, self.config.ablation.iterative_scorer_refresh) {
            (RewardBackend::Proxy(s), true) => Some(s.clone()),
            _ => None,
        };
        Ok(Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: self.config.stage().into(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            schedule_hash: self.schedule_hash.clone(),
            step: self.iteration,
            rng: RngState::capture(&self.rng),
            config: self.base_config.clone(),
            aux: serde_json::to_value(ResumeState {
                iteration: self.iteration,
                reward_stats: self.stats.clone(),
                scorer,
            })?,
        })
    }

    fn advantages(&mut self, ids: &[&str], rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let steps = rewards.first().map_or(0, Vec::len);
        match self.config.advantage_mode {
            AdvantageMode::PerStep => {
                let mut out = vec![vec![0.0; steps]; rewards.len()];
                for s in 0..steps {
                    let group: Vec<f64> = rewards.iter().map(|r| r[s]).collect();
                    self.stats.set_batch(group.clone())?;
                    for (id, &r) in ids.iter().zip(&group) {
                        self.stats.observe(&step_key(id, s), &[r])?;
                    }
                    for (k, (id, &r)) in ids.iter().zip(&group).enumerate() {
                        out[k][s] = crate::reward::advantage(r, &self.stats, &step_key(id, s))?;
                    }
                }
                Ok(out)
            }
            AdvantageMode::TrajectorySum => {
                let totals: Vec<f64> = rewards.iter().map(|r| r.iter().sum()).collect();
                self.stats.set_batch(totals.clone())?;
                for (id, &r) in ids.iter().zip(&totals) {
                    self.stats.observe(id, &[r])?;
                }
                ids.iter()
                    .zip(&totals)
                    .map(|(id, &r)| Ok(vec![crate::reward::advantage(r, &self.stats, id)?; steps]))
                    .collect()
            }
        }
    }

    /// Runs one outer iteration.
    pub fn step(&mut self) -> Result<IterationSummary> {
        let it = self.iteration;
        if it % self.config.old_refresh_every == 0 {
            self.params_old = self.params.clone();
        }
        let picks = select_batch(&mut self.rng, self.inputs.train.len(), self.config.batch_size);
        let pairs: Vec<&RestorationPair> = picks.iter().map(|&i| &self.inputs.train[i]).collect();
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        let conds: Vec<&Grid> = pairs.iter().map(|p| &p.degraded).collect();
        let gts: Vec<Grid> = pairs.iter().map(|p| p.gt.clone()).collect();
        let refinement = self.config.refinement();
        let seed = self.inputs.seed;
        let sampling = self.inputs.sampling_schedule;

        let (trajectories, outputs) = match self.config.mode {
            TrainingMode::Rl => {
                let requests: Vec<RolloutRequest> = pairs
                    .iter()
                    .map(|p| RolloutRequest {
                        id: &p.id,
                        cond: &p.degraded,
                        reference: &p.gt,
                    })
                    .collect();
                let options = RolloutOptions {
                    refinement,
                    final_step_reward_only: self.config.ablation.final_step_reward_only,
                };
                let trs = collect_rollouts(&self.params_old, &requests, sampling, &self.backend, seed, it, options)?;
                let outs = trs.iter().map(|t| t.output_image()).collect();
                (trs, outs)
            }
            TrainingMode::DiffSft => {
                let outs: Vec<Grid> = conds
                    .par_iter()
                    .enumerate()
                    .map(|(k, c)| restore(&self.params_old, c, sampling, seed, rollout_stream(it, k), refinement))
                    .collect::<Result<_>>()?;
                (Vec::new(), outs)
            }
        };
        let weights = if self.config.ablation.uniform_weights {
            vec![1.0; outputs.len()]
        } else {
            difficulty_weights(&outputs, &gts)?
        };

        let (steps, mean_rollout_reward) = if trajectories.is_empty() {
            (Vec::new(), 0.0)
        } else {
            let rewards: Vec<Vec<f64>> = trajectories.iter().map(|t| t.rewards()).collect();
            let finals: Vec<f64> = rewards.iter().map(|r| *r.last().expect("nonempty trajectory")).collect();
            let advantages = self.advantages(&ids, &rewards)?;
            let steps = prepare_policy_steps(&self.params_old, &trajectories, &conds, &advantages, sampling)?;
            (steps, finals.iter().sum::<f64>() / finals.len() as f64)
        };

        let sft_pairs: Vec<(&Grid, &Grid)> = pairs.iter().map(|p| (&p.gt, &p.degraded)).collect();
        let loss_weights = LossWeights {
            clip_eps: self.config.clip_eps,
            kl_weight: self.config.kl_weight,
        };
        let mut last = LossBreakdown {
            diff_term: 0.0,
            rl_term: 0.0,
            kl_term: 0.0,
            total: 0.0,
        };
        for _ in 0..self.config.inner_epochs {
            let draws = draw_sft_batch(&sft_pairs, self.inputs.sft_schedule, &mut self.rng);
            let terms = sft_sample_terms(&self.params, &draws, self.inputs.sft_schedule)?;
            let grads = match self.config.mode {
                TrainingMode::Rl => {
                    let (breakdown, g) =
                        combined_loss(&self.params, &terms, &steps, &weights, &loss_weights, sampling)?;
                    last = breakdown;
                    g
                }
                TrainingMode::DiffSft => {
                    let (loss, g) = weighted_sft(&terms, &weights, self.params.param_count());
                    last = LossBreakdown {
                        diff_term: loss,
                        rl_term: 0.0,
                        kl_term: 0.0,
                        total: loss,
                    };
                    g
                }
            };
            apply_update(self.params.values_mut(), &grads, &mut self.optimizer, &self.config.optimizer)?;
        }

        if self.config.ablation.iterative_scorer_refresh && (it + 1) % self.config.scorer_refresh_every == 0 {
            if let (RewardBackend::Proxy(scorer), Some(cal)) = (&mut self.backend, &self.calibration) {
                let labelled: Vec<(Grid, Grid)> = outputs.iter().cloned().zip(gts.iter().cloned()).collect();
                let base = scorer_examples(self.inputs.train);
                *scorer = refresh_scorer(scorer, &base, &labelled, cal, self.inputs.scorer_config)?;
            }
        }

        self.iteration += 1;
        Ok(IterationSummary {
            iteration: it,
            mean_rollout_reward,
            mean_weight: weights.iter().sum::<f64>() / weights.len() as f64,
            loss: last,
        })
    }
}

/// `sum_i w_i L_i` and its gradient.
pub fn weighted_sft(terms: &[(f64, Vec<f64>)], weights: &[f64], param_count: usize) -> (f64, Vec<f64>) {
    let mut grads = vec![0.0; param_count];
    let mut loss = 0.0;
    for ((l, g), &w) in terms.iter().zip(weights) {
        loss += w * l;
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += w * v;
        }
    }
    (loss, grads)
}

#[derive(Debug)]
pub struct RlOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
    pub summaries: Vec<IterationSummary>,
    pub backend: RewardBackend,
}

/// Runs the remaining iterations, logging an evaluation record before the first
/// update and after every iteration. When `checkpoint_path` is given the state is
/// saved after each iteration so the run can resume.
pub fn run_rl_training(
    inputs: RlInputs<'_>,
    config: RlConfig,
    start: &Checkpoint,
    backend: RewardBackend,
    mut store: Option<&mut RunStore>,
    checkpoint_path: Option<&Path>,
) -> Result<RlOutcome> {
    let mut trainer = RlTrainer::new(inputs, config, start, backend)?;
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut log = |record: MetricsRecord, store: &mut Option<&mut RunStore>| -> Result<()> {
        if let Some(s) = store.as_deref_mut() {
            s.append(&record)?;
        }
        records.push(record);
        Ok(())
    };
    if trainer.iteration() == 0 {
        log(trainer.evaluate()?, &mut store)?;
    }
    while !trainer.is_finished() {
        let summary = trainer.step()?;
        log::info!(
            "iteration {} reward {:.4} weight {:.3} loss {:.5}",
            summary.iteration,
            summary.mean_rollout_reward,
            summary.mean_weight,
            summary.loss.total
        );
        summaries.push(summary);
        log(trainer.evaluate()?, &mut store)?;
        if let Some(p) = checkpoint_path {
            trainer.checkpoint()?.save(p)?;
        }
    }
    let checkpoint = trainer.checkpoint()?;
    Ok(RlOutcome {
        checkpoint,
        records,
        summaries,
        backend: trainer.backend,
    })
}

/// Summary of a finished run stored next to its checkpoint.
pub fn run_summary(outcome: &RlOutcome) -> Value {
    json!({
        "iterations": outcome.summaries.len(),
        "final": outcome.records.last(),
    })
}
