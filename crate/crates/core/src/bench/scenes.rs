//! Base images for the synthetic restoration tasks.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

pub trait SceneSource: Sync {
    /// Produces the `index`-th clean image. Implementations must be pure in
    /// `(index, rng state)` so regeneration is reproducible.
    fn generate(&self, shape: Shape, index: usize, rng: &mut dyn rand::RngCore) -> Result<Grid>;
}

/// Gradients, filled shapes and striped texture patches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProceduralScenes;

impl SceneSource for ProceduralScenes {
    fn generate(&self, shape: Shape, _index: usize, rng: &mut dyn rand::RngCore) -> Result<Grid> {
        Ok(procedural_scene(shape, rng))
    }
}

pub fn procedural_scene<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Grid {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let mut base = vec![0.0; shape.plane()];

    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let lo: f64 = rng.random_range(0.25..0.55);
    let hi: f64 = rng.random_range(0.55..0.85);
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..shape.height {
        for x in 0..shape.width {
            let u = ((x as f64 / w - 0.5) * ct + (y as f64 / h - 0.5) * st) / std::f64::consts::SQRT_2 + 0.5;
            base[y * shape.width + x] = lo + (hi - lo) * u;
        }
    }

    let n_shapes = rng.random_range(2..=4);
    for _ in 0..n_shapes {
        let value: f64 = rng.random_range(0.1..0.95);
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        if rng.random_bool(0.5) {
            let r = rng.random_range(0.1..0.3) * w.min(h);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        base[y * shape.width + x] = value;
                    }
                }
            }
        } else {
            let hw = rng.random_range(0.1..0.3) * w;
            let hh = rng.random_range(0.1..0.3) * h;
            for y in 0..shape.height {
                for x in 0..shape.width {
                    if (x as f64 + 0.5 - cx).abs() <= hw && (y as f64 + 0.5 - cy).abs() <= hh {
                        base[y * shape.width + x] = value;
                    }
                }
            }
        }
    }

    // striped texture patch
    let px0 = rng.random_range(0..shape.width.max(2) / 2);
    let py0 = rng.random_range(0..shape.height.max(2) / 2);
    let pw = rng.random_range(shape.width / 4..=shape.width / 2).max(1);
    let ph = rng.random_range(shape.height / 4..=shape.height / 2).max(1);
    let freq: f64 = rng.random_range(0.6..1.6);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.08..0.18);
    let (fx, fy) = (phi.cos(), phi.sin());
    for y in py0..(py0 + ph).min(shape.height) {
        for x in px0..(px0 + pw).min(shape.width) {
            let v = &mut base[y * shape.width + x];
            *v += amp * (freq * (fx * x as f64 + fy * y as f64)).sin();
        }
    }

    let mut data = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        let tint: f64 = if c == 0 { 1.0 } else { rng.random_range(0.75..1.0) };
        data.extend(base.iter().map(|v| (v * tint).clamp(0.02, 0.98)));
    }
    Grid::from_vec(shape, data).expect("shape length")
}

/// Loads images from a folder (sorted by file name), converts them to the
/// requested channel count and resizes with a triangle filter.
#[derive(Debug, Clone)]
pub struct FolderScenes {
    files: Vec<PathBuf>,
}

impl FolderScenes {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!("no .png images in {}", dir.display())));
        }
        Ok(Self { files })
    }
}

impl SceneSource for FolderScenes {
    fn generate(&self, shape: Shape, index: usize, _rng: &mut dyn rand::RngCore) -> Result<Grid> {
        let path = &self.files[index % self.files.len()];
        let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let resized = img.resize_exact(
            shape.width as u32,
            shape.height as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut data = Vec::with_capacity(shape.len());
        match shape.channels {
            1 => {
                let g = resized.to_luma8();
                data.extend(g.pixels().map(|p| p.0[0] as f64 / 255.0));
            }
            3 => {
                let rgb = resized.to_rgb8();
                for c in 0..3 {
                    data.extend(rgb.pixels().map(|p| p.0[c] as f64 / 255.0));
                }
            }
            n => return Err(Error::invalid(format!("folder scenes support 1 or 3 channels, not {n}"))),
        }
        Grid::from_vec(shape, data)
    }
}
