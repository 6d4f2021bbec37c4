//! Fréchet distance between Gaussians fitted to hand-crafted image features.
//!
//! The feature map concatenates, per channel, a 4x4 average-pooled thumbnail and
//! an 8-bin magnitude-weighted histogram of unsigned gradient orientations.
//! Covariances get a ridge of [`COVARIANCE_RIDGE`] on the diagonal so small or
//! degenerate sets still have a well-defined matrix square root.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const COVARIANCE_RIDGE: f64 = 1e-6;
const POOL: usize = 4;
const ORIENT_BINS: usize = 8;

pub fn image_features(img: &Grid) -> Vec<f64> {
    let shape = img.shape();
    let (h, w) = (shape.height, shape.width);
    let mut out = Vec::with_capacity(shape.channels * (POOL * POOL + ORIENT_BINS));
    for c in 0..shape.channels {
        let p = img.channel(c);
        for by in 0..POOL {
            for bx in 0..POOL {
                let (y0, y1) = (by * h / POOL, ((by + 1) * h / POOL).max(by * h / POOL + 1).min(h));
                let (x0, x1) = (bx * w / POOL, ((bx + 1) * w / POOL).max(bx * w / POOL + 1).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += p[y * w + x];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        let mut hist = [0.0; ORIENT_BINS];
        for y in 0..h {
            for x in 0..w {
                let gx = p[y * w + (x + 1).min(w - 1)] - p[y * w + x.saturating_sub(1)];
                let gy = p[(y + 1).min(h - 1) * w + x] - p[y.saturating_sub(1) * w + x];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let ang = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let bin = ((ang / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                    hist[bin] += mag;
                }
            }
        }
        out.extend(hist.iter().map(|v| v / (h * w) as f64));
    }
    out
}

fn fit_gaussian(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyBatch("frechet feature set".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in features {
            let diff = DVector::from_column_slice(f) - &mean;
            cov += &diff * diff.transpose();
        }
        cov /= (n - 1) as f64;
    }
    for i in 0..d {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` between Gaussians fitted to the rows.
pub fn frechet_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = fit_gaussian(features_a)?;
    let (mu_b, cov_b) = fit_gaussian(features_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid("feature dimensions differ between sets"));
    }
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_proxy(set_a: &[Grid], set_b: &[Grid]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptyBatch("frechet_proxy needs two nonempty sets".into()));
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(image_features).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(image_features).collect();
    frechet_distance(&fa, &fb)
}
