//! Model checkpoints in the archive container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams};
use crate::optim::OptimizerState;
use crate::rng::RngState;

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Training stage that produced it, e.g. `sft` or `rl`.
    pub stage: String,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub schedule_hash: String,
    pub step: u64,
    pub rng: RngState,
    pub config: Value,
    /// Stage-specific resume state.
    pub aux: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    stage: String,
    arch: ArchConfig,
    schedule_hash: String,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    config: Value,
    aux: Value,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let meta = CheckpointMeta {
            format_version: self.format_version,
            stage: self.stage.clone(),
            arch: self.params.arch,
            schedule_hash: self.schedule_hash.clone(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
            config: self.config.clone(),
            aux: self.aux.clone(),
        };
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        a.push("params", self.params.values().to_vec());
        a.push("first_moment", self.optimizer.first_moment.clone());
        a.push("second_moment", self.optimizer.second_moment.clone());
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(CHECKPOINT_KIND)?;
        let version = a
            .meta
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("checkpoint without format_version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta: CheckpointMeta =
            serde_json::from_value(a.meta.clone()).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        let params = ModelParams::from_values(meta.arch, a.array("params")?.to_vec())?;
        let optimizer = OptimizerState {
            step: meta.optimizer_step,
            first_moment: a.array("first_moment")?.to_vec(),
            second_moment: a.array("second_moment")?.to_vec(),
        };
        if optimizer.first_moment.len() != params.param_count() || optimizer.second_moment.len() != params.param_count() {
            return Err(Error::Format("optimizer moments do not match the parameter count".into()));
        }
        Ok(Self {
            format_version: meta.format_version,
            stage: meta.stage,
            params,
            optimizer,
            schedule_hash: meta.schedule_hash,
            step: meta.step,
            rng: meta.rng,
            config: meta.config,
            aux: meta.aux,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}
