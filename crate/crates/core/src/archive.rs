//! Binary container for checkpoints and rollouts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "RRLA"
//! version      u32      container version
//! header_len   u64      byte length of the JSON header
//! header       JSON     {"kind": ..., "meta": {...}, "arrays": [{"name": ..., "len": n}, ...]}
//! payload      f64 x sum(len), arrays concatenated in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{LatentState, Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"RRLA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayDescriptor {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.push((name.into(), values));
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("archive has no array {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, v)| ArrayDescriptor {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        })?;
        let payload: usize = self.arrays.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, v) in &self.arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::Format("not an archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated archive header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("bad archive header: {e}")))?;
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if bytes.len() - header_end != 8 * total {
            return Err(Error::Format(format!(
                "archive payload holds {} bytes, header describes {}",
                bytes.len() - header_end,
                8 * total
            )));
        }
        let mut cursor = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for d in header.arrays {
            let v = bytes[cursor..cursor + 8 * d.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += 8 * d.len;
            arrays.push((d.name, v));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(())
    }
}

pub const TRAJECTORY_KIND: &str = "trajectories";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutProvenance {
    pub schedule_hash: String,
    pub model_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepMeta {
    t: usize,
    log_prob: f64,
    reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryMeta {
    condition_id: String,
    seed: u64,
    stream: u64,
    shape: Shape,
    steps: Vec<StepMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutMeta {
    provenance: RolloutProvenance,
    trajectories: Vec<TrajectoryMeta>,
}

pub fn save_trajectories(path: &Path, trajectories: &[Trajectory], provenance: &RolloutProvenance) -> Result<()> {
    let meta = RolloutMeta {
        provenance: provenance.clone(),
        trajectories: trajectories
            .iter()
            .map(|tr| TrajectoryMeta {
                condition_id: tr.condition_id.clone(),
                seed: tr.seed,
                stream: tr.stream,
                shape: tr.final_output.shape(),
                steps: tr
                    .steps
                    .iter()
                    .map(|s| StepMeta {
                        t: s.state.t,
                        log_prob: s.log_prob,
                        reward: s.reward,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut archive = Archive::new(TRAJECTORY_KIND, serde_json::to_value(&meta)?);
    for (k, tr) in trajectories.iter().enumerate() {
        for (s, step) in tr.steps.iter().enumerate() {
            archive.push(format!("{k}/{s}/state"), step.state.values.data().to_vec());
            archive.push(format!("{k}/{s}/action"), step.action.values.data().to_vec());
            archive.push(format!("{k}/{s}/x0"), step.x0_prediction.data().to_vec());
        }
        archive.push(format!("{k}/final"), tr.final_output.data().to_vec());
    }
    archive.write(path)
}

pub fn load_trajectories(path: &Path) -> Result<(RolloutProvenance, Vec<Trajectory>)> {
    let archive = Archive::read(path)?;
    archive.expect_kind(TRAJECTORY_KIND)?;
    let meta: RolloutMeta =
        serde_json::from_value(archive.meta.clone()).map_err(|e| Error::Format(format!("bad rollout metadata: {e}")))?;
    let grid = |name: String, shape: Shape| -> Result<Grid> { Grid::from_vec(shape, archive.array(&name)?.to_vec()) };
    let mut out = Vec::with_capacity(meta.trajectories.len());
    for (k, tm) in meta.trajectories.iter().enumerate() {
        let mut steps = Vec::with_capacity(tm.steps.len());
        for (s, sm) in tm.steps.iter().enumerate() {
            if sm.t == 0 {
                return Err(Error::Format(format!("trajectory {k} step {s} starts at t = 0")));
            }
            steps.push(TrajectoryStep {
                state: LatentState::new(grid(format!("{k}/{s}/state"), tm.shape)?, sm.t)?,
                condition_id: tm.condition_id.clone(),
                action: LatentState::new(grid(format!("{k}/{s}/action"), tm.shape)?, sm.t - 1)?,
                log_prob: sm.log_prob,
                reward: sm.reward,
                x0_prediction: grid(format!("{k}/{s}/x0"), tm.shape)?,
            });
        }
        out.push(Trajectory {
            steps,
            final_output: grid(format!("{k}/final"), tm.shape)?,
            condition_id: tm.condition_id.clone(),
            seed: tm.seed,
            stream: tm.stream,
        });
    }
    Ok((meta.provenance, out))
}
