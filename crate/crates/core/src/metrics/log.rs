//! Append-only metrics log.
//!
//! Line-delimited JSON. The first line is a header
//! `{"format":"restore-rl-metrics","version":1}`; every following line is
//! `{"record":{...},"sha256":"<hex>"}` where the digest covers the compact JSON
//! serialization of `record`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOG_FORMAT: &str = "restore-rl-metrics";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub frechet_proxy: f64,
    pub ot_cost: f64,
    pub mean_reward: f64,
    /// Mean proxy quality score of the evaluated outputs.
    pub quality_score: f64,
    #[serde(default)]
    pub per_task: BTreeMap<String, TaskMetrics>,
}

impl MetricsRecord {
    fn validate(&self) -> Result<()> {
        let values = [
            self.psnr,
            self.ssim,
            self.frechet_proxy,
            self.ot_cost,
            self.mean_reward,
            self.quality_score,
        ];
        if values.iter().any(|v| !v.is_finite())
            || self.per_task.values().any(|t| !t.psnr.is_finite() || !t.ssim.is_finite())
        {
            return Err(Error::NonFinite(format!("metrics record at iteration {}", self.iteration)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    record: MetricsRecord,
    sha256: String,
}

fn digest(record: &MetricsRecord) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_string(record)?.as_bytes())))
}

/// Single-writer handle on a metrics log file.
#[derive(Debug)]
pub struct RunStore {
    path: PathBuf,
    last_iteration: Option<u64>,
}

impl RunStore {
    /// Opens an existing log (validating it) or creates one with a header.
    pub fn open_or_create(path: &Path) -> Result<Self> {
        if path.exists() {
            let records = read_log(path)?;
            return Ok(Self {
                path: path.to_path_buf(),
                last_iteration: records.last().map(|r| r.iteration),
            });
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let header = serde_json::to_string(&Header {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
        })?;
        fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            last_iteration: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        if let Some(last) = self.last_iteration {
            if record.iteration < last {
                return Err(Error::invalid(format!(
                    "iteration {} precedes logged iteration {last}",
                    record.iteration
                )));
            }
        }
        let line = serde_json::to_string(&Line {
            record: record.clone(),
            sha256: digest(record)?,
        })?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.last_iteration = Some(record.iteration);
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<MetricsRecord>> {
        read_log(&self.path)
    }
}

pub fn log_metrics(store: &mut RunStore, record: &MetricsRecord) -> Result<()> {
    store.append(record)
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing header", path.display())))
        .and_then(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("bad header: {e}"))))?;
    if header.format != LOG_FORMAT {
        return Err(Error::Format(format!("unexpected log format {:?}", header.format)));
    }
    if header.version != LOG_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: LOG_VERSION,
        });
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("corrupt log line {}: {e}", n + 2)))?;
        if digest(&parsed.record)? != parsed.sha256 {
            return Err(Error::Format(format!("corrupt log line {}: checksum mismatch", n + 2)));
        }
        out.push(parsed.record);
    }
    Ok(out)
}
