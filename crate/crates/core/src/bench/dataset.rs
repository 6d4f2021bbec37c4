//! Persisted paired datasets.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json        format/version, task, seed, shape, one entry per pair
//! pairs/<id>.pair      ground truth grid followed by degraded grid
//! ```
//!
//! Each `.pair` file is two consecutive grid records in the little-endian
//! `GRD1` layout documented in [`crate::grid`]. Entry checksums are SHA-256 of
//! the whole pair file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::degrade::{degrade, Task};
use crate::bench::scenes::SceneSource;
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::rng;

pub const MANIFEST_FORMAT: &str = "restore-rl-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationPair {
    pub id: String,
    pub task: Task,
    pub severity: f64,
    pub gt: Grid,
    pub degraded: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub task: Task,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub severity_min: f64,
    pub severity_max: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 160,
            task: Task::Lowlight,
            channels: 1,
            height: 32,
            width: 32,
            severity_min: 0.3,
            severity_max: 0.9,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("dataset needs n >= 1"));
        }
        if !(self.severity_min > 0.0 && self.severity_min <= self.severity_max && self.severity_max <= 1.0) {
            return Err(Error::invalid("need 0 < severity_min <= severity_max <= 1"));
        }
        if !(self.train_fraction >= 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return Err(Error::invalid("split fractions must be non-negative and sum to at most 1"));
        }
        if self.shape().is_empty() {
            return Err(Error::invalid("empty image shape"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub severity: f64,
    /// Random stream used for this pair under the dataset seed.
    pub stream: u64,
    pub split: Split,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    pub shape: Shape,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

fn pair_stream(index: usize) -> u64 {
    rng::stream_id(&[0x5041_4952, index as u64])
}

fn severity_for<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> f64 {
    if cfg.severity_min == cfg.severity_max {
        cfg.severity_min
    } else {
        rng.random_range(cfg.severity_min..=cfg.severity_max)
    }
}

/// Generates one pair from its own stream; used by both generation and tests.
pub fn generate_pair(cfg: &DatasetConfig, scenes: &dyn SceneSource, index: usize) -> Result<RestorationPair> {
    let stream = pair_stream(index);
    let mut r = rng::stream(cfg.seed, stream);
    let gt = scenes.generate(cfg.shape(), index, &mut r)?;
    let severity = severity_for(cfg, &mut r);
    let degraded = degrade(&gt, cfg.task, severity, &mut r)?;
    Ok(RestorationPair {
        id: format!("{}-{index:05}", cfg.task),
        task: cfg.task,
        severity,
        gt,
        degraded,
    })
}

fn assign_splits(cfg: &DatasetConfig) -> Vec<Split> {
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, rng::stream_id(&[0x53504C54])));
    let n_train = (cfg.n as f64 * cfg.train_fraction).round() as usize;
    let n_val = ((cfg.n as f64 * cfg.val_fraction).round() as usize).min(cfg.n - n_train.min(cfg.n));
    let mut splits = vec![Split::Test; cfg.n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Generates the pairs of one split in memory, in index order.
pub fn generate_split(cfg: &DatasetConfig, scenes: &dyn SceneSource, split: Split) -> Result<Vec<RestorationPair>> {
    cfg.validate()?;
    let splits = assign_splits(cfg);
    (0..cfg.n)
        .into_par_iter()
        .filter(|&i| splits[i] == split)
        .map(|i| generate_pair(cfg, scenes, i))
        .collect()
}

fn encode_pair(pair: &RestorationPair) -> Vec<u8> {
    let mut bytes = pair.gt.to_bytes();
    bytes.extend(pair.degraded.to_bytes());
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates `cfg.n` pairs under `dir` and writes the manifest last.
pub fn make_dataset(dir: &Path, cfg: &DatasetConfig, scenes: &dyn SceneSource) -> Result<Dataset> {
    cfg.validate()?;
    let pairs_dir = dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
    let splits = assign_splits(cfg);
    let entries: Vec<ManifestEntry> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let pair = generate_pair(cfg, scenes, i)?;
            let bytes = encode_pair(&pair);
            let file = format!("pairs/{}.pair", pair.id);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestEntry {
                id: pair.id,
                file,
                severity: pair.severity,
                stream: pair_stream(i),
                split: splits[i],
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        task: cfg.task,
        seed: cfg.seed,
        shape: cfg.shape(),
        config: cfg.clone(),
        entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
    })
}

/// Read-only handle over a persisted dataset; pairs are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::DatasetIntegrity(format!("corrupt manifest {}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::DatasetIntegrity(format!("unexpected manifest format {:?}", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DatasetIntegrity(format!("duplicate id {}", e.id)));
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<RestorationPair> {
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(Error::DatasetIntegrity(format!(
                "checksum mismatch for {}: manifest {}, file {digest}",
                entry.id, entry.sha256
            )));
        }
        let mut cursor = bytes.as_slice();
        let gt = Grid::read_from(&mut cursor)?;
        let degraded = Grid::read_from(&mut cursor)?;
        if !cursor.is_empty() || gt.shape() != self.manifest.shape || degraded.shape() != gt.shape() {
            return Err(Error::DatasetIntegrity(format!("malformed pair file for {}", entry.id)));
        }
        Ok(RestorationPair {
            id: entry.id.clone(),
            task: self.manifest.task,
            severity: entry.severity,
            gt,
            degraded,
        })
    }

    /// Pairs in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<RestorationPair>> + '_ {
        self.manifest.entries.iter().map(move |e| self.read(e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = Result<RestorationPair>> + '_ {
        self.manifest
            .entries
            .iter()
            .filter(move |e| e.split == split)
            .map(move |e| self.read(e))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RestorationPair>> {
        self.split(split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scenes::ProceduralScenes;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n: 12,
            height: 8,
            width: 8,
            seed: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn manifest_matches_n_and_splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(dir.path(), &small(), &ProceduralScenes).unwrap();
        assert_eq!(ds.len(), 12);
        let mut ids = std::collections::HashSet::new();
        for e in ds.entries() {
            assert!(ids.insert(e.id.clone()));
        }
        let count = |s| ds.entries().iter().filter(|e| e.split == s).count();
        assert_eq!(count(Split::Train) + count(Split::Val) + count(Split::Test), 12);
        assert!(count(Split::Train) > 0 && count(Split::Test) > 0);
    }

    #[test]
    fn regeneration_and_round_trip_are_bit_exact() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = make_dataset(a.path(), &small(), &ProceduralScenes).unwrap();
        make_dataset(b.path(), &small(), &ProceduralScenes).unwrap();
        let db = load_dataset(b.path()).unwrap();
        let pa: Vec<_> = da.iter().collect::<Result<_>>().unwrap();
        let pb: Vec<_> = db.iter().collect::<Result<_>>().unwrap();
        assert_eq!(pa, pb);
        for (p, e) in pb.iter().zip(db.entries()) {
            assert_eq!(p.id, e.id);
            let direct = generate_pair(&small(), &ProceduralScenes, pb.iter().position(|q| q.id == p.id).unwrap()).unwrap();
            assert_eq!(&direct, p);
        }
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(dir.path(), &small(), &ProceduralScenes).unwrap();
        let entry = ds.entries()[3].clone();
        let path = dir.path().join(&entry.file);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(matches!(ds.read(&entry), Err(Error::DatasetIntegrity(_))));
    }

    #[test]
    fn corrupt_manifest_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), &small(), &ProceduralScenes).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"version\": 1", "\"version\": 9")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::VersionMismatch { .. })));
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DatasetIntegrity(_))));
    }

    #[test]
    fn unwritable_destination_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(make_dataset(&file.join("sub"), &small(), &ProceduralScenes).is_err());
    }
}
