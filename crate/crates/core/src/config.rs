//! Layered experiment configuration and self-describing run directories.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bench::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::reward::{RewardKind, ScorerConfig};
use crate::rl::RlConfig;
use crate::schedule::{build_schedule, DiffusionSchedule, ScheduleKind};
use crate::sft::SftConfig;

pub const LOCK_FILE: &str = ".lock";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const RUN_INFO_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    /// Length of the respaced chain used for rollouts and evaluation.
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
            sampling_steps: 10,
        }
    }
}

impl ScheduleConfig {
    /// The full training schedule and its sampling subsequence.
    pub fn build(&self) -> Result<(DiffusionSchedule, DiffusionSchedule)> {
        let base = build_schedule(self.num_steps, self.beta_start, self.beta_end, self.kind)?;
        let sampling = base.respace(self.sampling_steps)?;
        Ok((base, sampling))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub backend: RewardKind,
    /// Subprocess command or `http://` URL; falls back to the environment variable.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            backend: RewardKind::Proxy,
            endpoint: None,
            timeout_ms: 10_000,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub model: ArchConfig,
    pub sft: SftConfig,
    pub scorer: ScorerConfig,
    pub reward: RewardConfig,
    pub rl: RlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ArchConfig::default(),
            sft: SftConfig::default(),
            scorer: ScorerConfig::default(),
            reward: RewardConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Applies `a.b.c=value` to a JSON tree. Values parse as JSON when possible, else as strings.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} has an empty segment")));
    }
    let mut node = tree;
    for (depth, key) in keys.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {} is not a table", keys[..depth].join("."))))?;
        if depth + 1 == keys.len() {
            map.insert(key.to_string(), parse_scalar(raw.trim()));
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    Ok(())
}

fn read_layer(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl ExperimentConfig {
    /// Defaults, then the optional file (TOML, or JSON by extension), then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        if let Some(p) = file {
            merge(&mut tree, read_layer(p)?);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let config: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.channels != self.dataset.channels {
            return Err(Error::Config(format!(
                "model.channels = {} but dataset.channels = {}",
                self.model.channels, self.dataset.channels
            )));
        }
        if self.schedule.sampling_steps == 0 || self.schedule.sampling_steps > self.schedule.num_steps {
            return Err(Error::Config("schedule.sampling_steps must lie in 1..=num_steps".into()));
        }
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.rl.validate()
    }
}

/// Exclusive handle on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Locked(dir.to_path_buf()),
                _ => Error::io(&path, e),
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub crate_version: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub stage: String,
}

/// Writes the resolved config and run identity into `dir`.
pub fn describe_run(dir: &Path, config: &ExperimentConfig, stage: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
    let info = RunInfo {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        dataset_seed: config.dataset.seed,
        stage: stage.into(),
    };
    let info_path = dir.join(RUN_INFO_FILE);
    fs::write(&info_path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&info_path, e))
}
