//! Stage orchestration behind the command-line verbs.
//!
//! Every stage reads and writes under `config.output_dir`:
//!
//! ```text
//! data/                 dataset manifest and pairs
//! sft/checkpoint.rrla   supervised checkpoint
//! scorer/scorer.json    proxy quality scorer
//! rl/                   RL run: checkpoint, metrics.jsonl
//! control/              difficulty-weighted SFT run with the same schedule
//! eval/                 comparison table on the test split
//! ablate/<variant>/     one RL run per flag combination, plus comparison.txt
//! report/               reward curve and metric tables
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{load_dataset, make_dataset, Dataset, ProceduralScenes, RestorationPair, Split};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::config::{describe_run, ExperimentConfig, RunLock};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{format_comparison_table, read_log, render_report, ComparisonRow, MetricsRecord, RunStore};
use crate::metrics::report::{line_chart_svg, ReportOutput};
use crate::model::init_model;
use crate::optim::OptimizerState;
use crate::reward::{
    train_quality_scorer, Endpoint, ExternalScorer, ExternalScorerConfig, RewardBackend, RewardKind, ScorerParams,
    SCORER_ENDPOINT_ENV,
};
use crate::rl::train::{score_outputs, DIFF_SFT_STAGE, RL_STAGE};
use crate::rl::{evaluate_model, run_rl_training, AblationFlags, RlConfig, RlInputs, RlOutcome, TrainingMode};
use crate::rng::{self, RngState};
use crate::sft::train_sft;

pub const SFT_STAGE: &str = "sft";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.rrla";
pub const COMPARISON_FILE: &str = "comparison.txt";

const INIT_TAG: u64 = 0x494e_4954;
const SFT_TAG: u64 = 0x5346_5400;
const SCORER_TAG: u64 = 0x5343_4f52;
/// SFT steps between checkpoint writes.
const SFT_CHUNK: u64 = 50;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingDependency { .. } => EXIT_DEPENDENCY,
        _ => EXIT_RUNTIME,
    }
}

fn missing(what: &str, path: &Path) -> Error {
    Error::MissingDependency {
        what: what.into(),
        path: path.to_path_buf(),
    }
}

/// Paths of every stage artifact under one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn sft_dir(&self) -> PathBuf {
        self.root.join("sft")
    }
    pub fn sft_checkpoint(&self) -> PathBuf {
        self.sft_dir().join(CHECKPOINT_FILE)
    }
    pub fn scorer_dir(&self) -> PathBuf {
        self.root.join("scorer")
    }
    pub fn scorer(&self) -> PathBuf {
        self.scorer_dir().join("scorer.json")
    }
    pub fn rl_dir(&self) -> PathBuf {
        self.root.join("rl")
    }
    pub fn control_dir(&self) -> PathBuf {
        self.root.join("control")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Stage runner bound to one resolved configuration.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: ExperimentConfig,
    paths: RunPaths,
}

/// One finished RL-style run inside an ablation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub dir: PathBuf,
    pub flags: AblationFlags,
    pub mode: TrainingMode,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<ComparisonRow>,
    pub table_path: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Self {
        let paths = RunPaths {
            root: config.output_dir.clone(),
        };
        Self { config, paths }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    /// Generates the dataset, or reuses an existing one built from the same config.
    pub fn make_data(&self) -> Result<Dataset> {
        let dir = self.paths.data();
        let _lock = RunLock::acquire(&dir)?;
        if dir.join("manifest.json").exists() {
            let ds = load_dataset(&dir)?;
            if ds.manifest().config == self.config.dataset {
                return Ok(ds);
            }
            return Err(Error::Config(format!(
                "{} holds a dataset built from a different config; choose another output_dir",
                dir.display()
            )));
        }
        describe_run(&dir, &self.config, "make_data")?;
        make_dataset(&dir, &self.config.dataset, &ProceduralScenes)
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.paths.data();
        if !dir.join("manifest.json").exists() {
            return Err(missing("dataset (run make-data first)", &dir.join("manifest.json")));
        }
        let ds = load_dataset(&dir)?;
        if ds.manifest().config != self.config.dataset {
            return Err(Error::Config(format!(
                "dataset at {} was built from a different dataset config",
                dir.display()
            )));
        }
        Ok(ds)
    }

    fn split(&self, split: Split) -> Result<Vec<RestorationPair>> {
        self.dataset()?.load_split(split)
    }

    /// Supervised training. With `resume`, continues from the saved step count.
    pub fn train_sft(&self, resume: bool) -> Result<Checkpoint> {
        let train = self.split(Split::Train)?;
        let dir = self.paths.sft_dir();
        let _lock = RunLock::acquire(&dir)?;
        describe_run(&dir, &self.config, SFT_STAGE)?;
        let (base, _) = self.config.schedule.build()?;
        let path = self.paths.sft_checkpoint();
        let cfg = &self.config.sft;

        let (mut params, mut optimizer, mut rng, mut done) = if resume && path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.stage != SFT_STAGE {
                return Err(Error::Format(format!("{} is not an SFT checkpoint", path.display())));
            }
            let rng = ck
                .rng
                .restore()
                .ok_or_else(|| Error::Format("unreadable rng state in checkpoint".into()))?;
            (ck.params, ck.optimizer, rng, ck.step)
        } else {
            let params = init_model(self.config.model, &mut rng::stream(self.config.seed, rng::stream_id(&[INIT_TAG])))?;
            let optimizer = OptimizerState::new(params.param_count());
            (params, optimizer, rng::stream(self.config.seed, rng::stream_id(&[SFT_TAG])), 0)
        };
        let pairs: Vec<(&Grid, &Grid)> = train.iter().map(|p| (&p.gt, &p.degraded)).collect();
        let save = |params: &crate::model::ModelParams, opt: &OptimizerState, rng: &rng::StreamRng, step: u64| {
            Checkpoint {
                format_version: CHECKPOINT_VERSION,
                stage: SFT_STAGE.into(),
                params: params.clone(),
                optimizer: opt.clone(),
                schedule_hash: base.hash(),
                step,
                rng: RngState::capture(rng),
                config: serde_json::to_value(cfg).unwrap_or_default(),
                aux: serde_json::Value::Null,
            }
        };
        while done < cfg.steps {
            let chunk = SFT_CHUNK.min(cfg.steps - done);
            let chunk_cfg = crate::sft::SftConfig { steps: chunk, ..*cfg };
            let losses = train_sft(&mut params, &mut optimizer, &pairs, &base, &chunk_cfg, &mut rng)?;
            done += chunk;
            log::info!("sft step {done}/{} loss {:.5}", cfg.steps, losses.last().copied().unwrap_or(f64::NAN));
            save(&params, &optimizer, &rng, done).save(&path)?;
        }
        let ck = save(&params, &optimizer, &rng, done);
        ck.save(&path)?;
        Ok(ck)
    }

    /// Fits the proxy quality scorer on the train split, validating on val.
    pub fn train_scorer(&self) -> Result<ScorerParams> {
        let ds = self.dataset()?;
        let (train, val) = (ds.load_split(Split::Train)?, ds.load_split(Split::Val)?);
        let dir = self.paths.scorer_dir();
        let _lock = RunLock::acquire(&dir)?;
        describe_run(&dir, &self.config, "scorer")?;
        let mut rng = rng::stream(self.config.seed, rng::stream_id(&[SCORER_TAG]));
        let scorer = train_quality_scorer(&train, &val, &self.config.scorer, &mut rng)?;
        let path = self.paths.scorer();
        fs::write(&path, serde_json::to_string_pretty(&scorer)?).map_err(|e| Error::io(&path, e))?;
        Ok(scorer)
    }

    pub fn load_scorer(&self) -> Result<ScorerParams> {
        let path = self.paths.scorer();
        if !path.exists() {
            return Err(missing("proxy quality scorer (run train-scorer first)", &path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn load_sft_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.paths.sft_checkpoint();
        if !path.exists() {
            return Err(missing("SFT checkpoint (run train-sft first)", &path));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.step < self.config.sft.steps {
            return Err(missing(
                &format!("finished SFT checkpoint (found step {} of {}; rerun train-sft --resume)", ck.step, self.config.sft.steps),
                &path,
            ));
        }
        Ok(ck)
    }

    /// Reward backend named by the config; the proxy scorer is passed in by the caller.
    pub fn reward_backend(&self, scorer: &ScorerParams) -> Result<RewardBackend> {
        let r = &self.config.reward;
        Ok(match r.backend {
            RewardKind::Reconstruction => RewardBackend::Reconstruction,
            RewardKind::Proxy => RewardBackend::Proxy(scorer.clone()),
            RewardKind::External => {
                let spec = match &r.endpoint {
                    Some(s) => s.clone(),
                    None => std::env::var(SCORER_ENDPOINT_ENV).map_err(|_| {
                        missing(
                            &format!("external scorer endpoint (set reward.endpoint or {SCORER_ENDPOINT_ENV})"),
                            Path::new(SCORER_ENDPOINT_ENV),
                        )
                    })?,
                };
                let cfg = ExternalScorerConfig {
                    endpoint: Endpoint::parse(&spec)?,
                    timeout_ms: r.timeout_ms,
                    max_in_flight: r.max_in_flight,
                };
                RewardBackend::External(ExternalScorer::new(cfg)?)
            }
        })
    }

    /// Runs one RL-style stage into `dir` with the given loop config.
    pub fn run_rl_stage(&self, dir: &Path, rl: RlConfig, resume: bool) -> Result<RlOutcome> {
        let ds = self.dataset()?;
        let sft = self.load_sft_checkpoint()?;
        let scorer = self.load_scorer()?;
        let backend = self.reward_backend(&scorer)?;
        let (train, test) = (ds.load_split(Split::Train)?, ds.load_split(Split::Test)?);
        let (base, sampling) = self.config.schedule.build()?;

        let _lock = RunLock::acquire(dir)?;
        let mut stage_config = self.config.clone();
        stage_config.rl = rl.clone();
        let stage = match rl.mode {
            TrainingMode::Rl => RL_STAGE,
            TrainingMode::DiffSft => DIFF_SFT_STAGE,
        };
        describe_run(dir, &stage_config, stage)?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        let log_path = dir.join(METRICS_FILE);
        let start = if resume && ck_path.exists() {
            Checkpoint::load(&ck_path)?
        } else {
            for p in [&ck_path, &log_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            sft
        };
        let mut store = RunStore::open_or_create(&log_path)?;
        let inputs = RlInputs {
            train: &train,
            eval: &test,
            sft_schedule: &base,
            sampling_schedule: &sampling,
            quality_scorer: &scorer,
            scorer_config: &self.config.scorer,
            seed: self.config.seed,
        };
        let outcome = run_rl_training(inputs, rl, &start, backend, Some(&mut store), Some(&ck_path))?;
        outcome.checkpoint.save(&ck_path)?;
        Ok(outcome)
    }

    pub fn train_rl(&self, resume: bool) -> Result<RlOutcome> {
        let dir = match self.config.rl.mode {
            TrainingMode::Rl => self.paths.rl_dir(),
            TrainingMode::DiffSft => self.paths.control_dir(),
        };
        self.run_rl_stage(&dir, self.config.rl.clone(), resume)
    }

    /// Scores the degraded inputs and every available checkpoint on the test split.
    pub fn evaluate(&self) -> Result<Vec<ComparisonRow>> {
        let test = self.split(Split::Test)?;
        let sft = self.load_sft_checkpoint()?;
        let scorer = self.load_scorer()?;
        let (_, sampling) = self.config.schedule.build()?;
        let dir = self.paths.eval_dir();
        let _lock = RunLock::acquire(&dir)?;
        describe_run(&dir, &self.config, "evaluate")?;

        let inputs: Vec<Grid> = test.iter().map(|p| p.degraded.clone()).collect();
        let mut rows = vec![ComparisonRow::from_record("Degraded input", &score_outputs(&inputs, &test, None, &scorer, 0)?)];
        let mut candidates = vec![("Baseline (SFT)".to_string(), sft)];
        for (label, d) in [("+Diff.SFT", self.paths.control_dir()), ("+RL", self.paths.rl_dir())] {
            let p = d.join(CHECKPOINT_FILE);
            if p.exists() {
                candidates.push((label.to_string(), Checkpoint::load(&p)?));
            }
        }
        let mut records = Vec::new();
        for (label, ck) in &candidates {
            let rec = evaluate_model(&ck.params, &test, &sampling, self.config.seed, None, &scorer, ck.step)?;
            rows.push(ComparisonRow::from_record(label.clone(), &rec));
            records.push((label.clone(), rec));
        }
        let table = format_comparison_table(&rows);
        let path = dir.join(COMPARISON_FILE);
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        let json_path = dir.join("metrics.json");
        fs::write(&json_path, serde_json::to_string_pretty(&records)?).map_err(|e| Error::io(&json_path, e))?;
        Ok(rows)
    }

    /// Flag grid for `flags`: all 2^k on/off combinations. With no flags, the default
    /// sweep is the full method, the control, and each variant flag alone.
    pub fn ablation_grid(&self, flags: &[String]) -> Result<Vec<(String, TrainingMode, AblationFlags)>> {
        let base = self.config.rl.ablation;
        if flags.is_empty() {
            let mut grid = vec![
                ("full".to_string(), TrainingMode::Rl, base),
                ("diff_sft".to_string(), TrainingMode::DiffSft, base),
            ];
            for name in AblationFlags::NAMES {
                let mut f = base;
                f.set(name, true).map_err(|e| Error::Config(e.to_string()))?;
                grid.push((name.to_string(), TrainingMode::Rl, f));
            }
            return Ok(grid);
        }
        let mut names: Vec<&str> = Vec::new();
        for f in flags {
            if !AblationFlags::NAMES.contains(&f.as_str()) {
                return Err(Error::Config(format!(
                    "unknown ablation flag {f:?} (expected one of {})",
                    AblationFlags::NAMES.join(", ")
                )));
            }
            if !names.contains(&f.as_str()) {
                names.push(f);
            }
        }
        let mut grid = Vec::with_capacity(1 << names.len());
        for mask in 0..(1u32 << names.len()) {
            let mut f = base;
            let mut on = Vec::new();
            for (bit, name) in names.iter().enumerate() {
                let value = mask & (1 << bit) != 0;
                f.set(name, value)?;
                on.push(format!("{name}={}", if value { "on" } else { "off" }));
            }
            grid.push((on.join(","), TrainingMode::Rl, f));
        }
        Ok(grid)
    }

    /// Runs every grid entry into its own directory and writes one comparison table.
    pub fn ablate(&self, flags: &[String], resume: bool) -> Result<AblationSummary> {
        let grid = self.ablation_grid(flags)?;
        let root = self.paths.ablate_dir();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut runs = Vec::new();
        for (label, mode, f) in grid {
            let dir = root.join(label.replace([',', '='], "_"));
            let rl = RlConfig {
                mode,
                ablation: f,
                ..self.config.rl.clone()
            };
            log::info!("ablation run {label}");
            let out = self.run_rl_stage(&dir, rl, resume)?;
            let records = read_log(&dir.join(METRICS_FILE))?;
            debug_assert_eq!(records.len(), out.records.len().max(records.len()));
            runs.push(AblationRun {
                label,
                dir,
                flags: f,
                mode,
                records,
            });
        }

        let mut rows = Vec::new();
        if let Some(first) = runs.first().and_then(|r| r.records.first()) {
            rows.push(ComparisonRow::from_record("Baseline (SFT)", first));
        }
        for r in &runs {
            if let Some(last) = r.records.last() {
                let label = match (flags.is_empty(), r.mode, r.label.as_str()) {
                    (true, TrainingMode::DiffSft, _) => "+Diff.SFT".to_string(),
                    (true, _, "full") => "+RL".to_string(),
                    (true, _, name) => format!("+RL {name}"),
                    (false, _, name) => name.to_string(),
                };
                rows.push(ComparisonRow::from_record(label, last));
            }
        }
        let table_path = root.join(COMPARISON_FILE);
        fs::write(&table_path, format_comparison_table(&rows)).map_err(|e| Error::io(&table_path, e))?;
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .filter(|r| r.mode == TrainingMode::Rl)
            .map(|r| {
                (
                    r.label.clone(),
                    r.records.iter().map(|m| (m.iteration as f64, m.mean_reward)).collect(),
                )
            })
            .collect();
        let svg_path = root.join("reward_curves.svg");
        fs::write(&svg_path, line_chart_svg("reward per iteration", "reward", &series))
            .map_err(|e| Error::io(&svg_path, e))?;
        Ok(AblationSummary {
            runs,
            rows,
            table_path,
        })
    }

    /// Renders the RL run's metrics log.
    pub fn report(&self) -> Result<ReportOutput> {
        let log_path = self.paths.rl_dir().join(METRICS_FILE);
        if !log_path.exists() {
            return Err(missing("RL metrics log (run train-rl first)", &log_path));
        }
        let records = read_log(&log_path)?;
        let dir = self.paths.report_dir();
        let _lock = RunLock::acquire(&dir)?;
        render_report(&records, &dir)
    }
}

impl Pipeline {
    /// Every stage in order: data, SFT, scorer, RL, evaluation and report.
    pub fn run_all(&self, resume: bool) -> Result<ReportOutput> {
        self.make_data()?;
        let sft_done = resume
            && self.paths.sft_checkpoint().exists()
            && Checkpoint::load(&self.paths.sft_checkpoint())?.step >= self.config.sft.steps;
        if !sft_done {
            self.train_sft(resume)?;
        }
        self.train_scorer()?;
        self.train_rl(resume)?;
        self.evaluate()?;
        self.report()
    }
}
