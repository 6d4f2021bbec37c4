mod common;

use std::fs;

use common::tiny_experiment;
use restore_rl::bench::Split;
use restore_rl::checkpoint::Checkpoint;
use restore_rl::diffusion::restore;
use restore_rl::error::Error;
use restore_rl::grid::Grid;
use restore_rl::optim::apply_update;
use restore_rl::pipeline::{exit_code, Pipeline, CHECKPOINT_FILE, COMPARISON_FILE, EXIT_CONFIG, EXIT_DEPENDENCY, METRICS_FILE};
use restore_rl::reward::RewardBackend;
use restore_rl::rl::difficulty_weights;
use restore_rl::rl::rollout::rollout_stream;
use restore_rl::rl::train::{select_batch, session_rng, weighted_sft};
use restore_rl::rl::{RlConfig, RlInputs, RlTrainer, TrainingMode};
use restore_rl::sft::{draw_sft_batch, sft_sample_terms};

fn prepared(dir: &std::path::Path) -> Pipeline {
    let p = Pipeline::new(tiny_experiment(dir));
    p.make_data().unwrap();
    p.train_sft(false).unwrap();
    p.train_scorer().unwrap();
    p
}

#[test]
fn rl_without_sft_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_experiment(dir.path()));
    p.make_data().unwrap();
    let err = p.train_rl(false).unwrap_err();
    match &err {
        Error::MissingDependency { what, path } => {
            assert!(what.contains("SFT checkpoint"), "{what}");
            assert!(path.ends_with(format!("sft/{CHECKPOINT_FILE}")));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(exit_code(&err), EXIT_DEPENDENCY);
}

#[test]
fn stages_before_data_report_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_experiment(dir.path()));
    let err = p.train_sft(false).unwrap_err();
    assert!(matches!(&err, Error::MissingDependency { what, .. } if what.contains("dataset")));
    assert!(matches!(p.report().unwrap_err(), Error::MissingDependency { .. }));
}

#[test]
fn config_errors_map_to_their_exit_code() {
    let err = restore_rl::config::ExperimentConfig::resolve(None, &["rl.clip_eps=2".into()]).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn two_flag_ablation_makes_four_runs_and_one_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let flags = vec!["uniform_weights".to_string(), "track_only_norm".to_string()];
    let summary = p.ablate(&flags, false).unwrap();
    assert_eq!(summary.runs.len(), 4);
    for run in &summary.runs {
        assert!(run.dir.join(METRICS_FILE).exists());
        assert_eq!(run.records.len(), 3);
    }
    let dirs = fs::read_dir(p.paths().ablate_dir()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 4);
    let table = fs::read_to_string(&summary.table_path).unwrap();
    assert!(summary.table_path.ends_with(COMPARISON_FILE));
    assert_eq!(table.lines().count(), 2 + 1 + 4);
}

#[test]
fn default_ablation_covers_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let grid = p.ablation_grid(&[]).unwrap();
    assert_eq!(grid.len(), 8);
    assert!(p.ablation_grid(&["no_such_flag".into()]).is_err());
}

#[test]
fn pinned_seed_pipeline_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(tiny_experiment(a.path())).run_all(false).unwrap();
    Pipeline::new(tiny_experiment(b.path())).run_all(false).unwrap();
    let log = |d: &std::path::Path| fs::read(d.join("rl").join(METRICS_FILE)).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    let ck = |d: &std::path::Path| fs::read(d.join("rl").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck(a.path()), ck(b.path()));
    assert!(a.path().join("report/reward_curve.svg").exists());
    assert!(a.path().join("eval").join(COMPARISON_FILE).exists());
}

#[test]
fn resumed_rl_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let full = p.run_rl_stage(&dir.path().join("full"), RlConfig { iterations: 3, ..p.config().rl.clone() }, false).unwrap();
    let part_dir = dir.path().join("part");
    p.run_rl_stage(&part_dir, RlConfig { iterations: 1, ..p.config().rl.clone() }, false).unwrap();
    let resumed = p.run_rl_stage(&part_dir, RlConfig { iterations: 3, ..p.config().rl.clone() }, true).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(
        fs::read(dir.path().join("full").join(METRICS_FILE)).unwrap(),
        fs::read(part_dir.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn scorer_refresh_survives_resume() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let mut rl = p.config().rl.clone();
    rl.ablation.iterative_scorer_refresh = true;
    let full = p.run_rl_stage(&dir.path().join("full"), RlConfig { iterations: 2, ..rl.clone() }, false).unwrap();
    let part = dir.path().join("part");
    p.run_rl_stage(&part, RlConfig { iterations: 1, ..rl.clone() }, false).unwrap();
    let resumed = p.run_rl_stage(&part, RlConfig { iterations: 2, ..rl }, true).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    match (&resumed.backend, &full.backend) {
        (RewardBackend::Proxy(a), RewardBackend::Proxy(b)) => {
            assert_eq!(a, b);
            assert_eq!(a.metadata.refreshes, 2);
        }
        _ => panic!("expected proxy backends"),
    }
}

#[test]
fn control_iteration_is_a_plain_weighted_sft_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let cfg = p.config().clone();
    let ds = restore_rl::bench::load_dataset(&p.paths().data()).unwrap();
    let (train, test) = (ds.load_split(Split::Train).unwrap(), ds.load_split(Split::Test).unwrap());
    let (base, sampling) = cfg.schedule.build().unwrap();
    let scorer = p.load_scorer().unwrap();
    let sft = Checkpoint::load(&p.paths().sft_checkpoint()).unwrap();
    let rl = RlConfig {
        mode: TrainingMode::DiffSft,
        inner_epochs: 1,
        ..cfg.rl.clone()
    };
    let inputs = RlInputs {
        train: &train,
        eval: &test,
        sft_schedule: &base,
        sampling_schedule: &sampling,
        quality_scorer: &scorer,
        scorer_config: &cfg.scorer,
        seed: cfg.seed,
    };
    let mut trainer = RlTrainer::new(inputs, rl.clone(), &sft, RewardBackend::Proxy(scorer.clone())).unwrap();
    trainer.step().unwrap();

    let mut rng = session_rng(cfg.seed);
    let picks = select_batch(&mut rng, train.len(), rl.batch_size);
    let outputs: Vec<Grid> = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| restore(&sft.params, &train[i].degraded, &sampling, cfg.seed, rollout_stream(0, k), rl.refinement()).unwrap())
        .collect();
    let gts: Vec<Grid> = picks.iter().map(|&i| train[i].gt.clone()).collect();
    let weights = difficulty_weights(&outputs, &gts).unwrap();
    let pairs: Vec<(&Grid, &Grid)> = picks.iter().map(|&i| (&train[i].gt, &train[i].degraded)).collect();
    let draws = draw_sft_batch(&pairs, &base, &mut rng);
    let terms = sft_sample_terms(&sft.params, &draws, &base).unwrap();
    let (_, grads) = weighted_sft(&terms, &weights, sft.params.param_count());
    let mut expected = sft.params.clone();
    let mut opt = restore_rl::optim::OptimizerState::new(expected.param_count());
    apply_update(expected.values_mut(), &grads, &mut opt, &rl.optimizer).unwrap();

    assert_eq!(trainer.params().values(), expected.values());
}
