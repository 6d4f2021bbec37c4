//! No-reference proxy quality scorer.
//!
//! A fixed hand-crafted feature vector is standardized and passed through a
//! one-hidden-layer tanh network; the output is squashed into `[1, 5]` with
//! `1 + 4 sigmoid(z)`. Training targets are `5` for clean references and
//! `5 - 4 severity` for degraded images.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::RestorationPair;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::spearman;
use crate::optim::{apply_update, OptimizerConfig, OptimizerState};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;
pub const FEATURE_COUNT: usize = 13;
pub const LABEL_SCHEME: &str = "reference=5, degraded=5-4*severity";

/// Target score for an image degraded with `severity` (0 for a clean reference).
pub fn severity_label(severity: f64) -> f64 {
    SCORE_MAX - (SCORE_MAX - SCORE_MIN) * severity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs used by each iterative refresh.
    pub refresh_epochs: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 600,
            lr: 0.01,
            refresh_epochs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerMetadata {
    pub label_scheme: String,
    pub epochs: usize,
    pub train_examples: usize,
    pub heldout_spearman: Option<f64>,
    pub refreshes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerParams {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub hidden_weight: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub out_weight: Vec<f64>,
    pub out_bias: f64,
    pub metadata: ScorerMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerExample {
    pub features: Vec<f64>,
    pub label: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Hand-crafted quality features of the channel-averaged image.
pub fn quality_features(image: &Grid) -> Vec<f64> {
    let shape = image.shape();
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut lum = vec![0.0; plane];
    for c in 0..shape.channels {
        for (l, v) in lum.iter_mut().zip(image.channel(c)) {
            *l += v / shape.channels as f64;
        }
    }
    let n = plane as f64;
    let mean = lum.iter().sum::<f64>() / n;
    let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();

    let at = |y: usize, x: usize| lum[y * w + x];
    let (mut gx2, mut gy2, mut grad_abs) = (0.0, 0.0, 0.0);
    let (mut lap2, mut hf) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x);
            let gy = at((y + 1).min(h - 1), x) - at(y, x);
            gx2 += gx * gx;
            gy2 += gy * gy;
            grad_abs += gx.abs() + gy.abs();
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let lap = at(ym, x) + at(yp, x) + at(y, xm) + at(y, xp) - 4.0 * at(y, x);
            lap2 += lap * lap;
            let mut box_sum = 0.0;
            for yy in [ym, y, yp] {
                for xx in [xm, x, xp] {
                    box_sum += at(yy, xx);
                }
            }
            hf += (at(y, x) - box_sum / 9.0).abs();
        }
    }
    let mut sorted = lum.clone();
    sorted.sort_by(f64::total_cmp);
    let dark = lum.iter().filter(|&&v| v < 0.1).count() as f64 / n;
    let bright = lum.iter().filter(|&&v| v > 0.9).count() as f64 / n;

    let (bh, bw) = ((h / 4).max(1), (w / 4).max(1));
    let mut block_means = Vec::new();
    for by in (0..h).step_by(bh) {
        for bx in (0..w).step_by(bw) {
            let mut s = 0.0;
            let mut k = 0usize;
            for y in by..(by + bh).min(h) {
                for x in bx..(bx + bw).min(w) {
                    s += at(y, x);
                    k += 1;
                }
            }
            block_means.push(s / k as f64);
        }
    }
    let bm = block_means.iter().sum::<f64>() / block_means.len() as f64;
    let block_std = (block_means.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / block_means.len() as f64).sqrt();

    vec![
        mean,
        std,
        grad_abs / n,
        (lap2 / n + 1e-8).ln(),
        quantile(&sorted, 0.1),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.9),
        dark,
        bright,
        hf / n,
        ((gx2 + 1e-8) / (gy2 + 1e-8)).ln().abs(),
        block_std,
        ((lap2 + 1e-8) / (gx2 + gy2 + 1e-8)).ln(),
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Activations {
    hidden: Vec<f64>,
    z: f64,
}

impl ScorerParams {
    fn hidden_size(&self) -> usize {
        self.hidden_bias.len()
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((f, m), s)| (f - m) / s)
            .collect()
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let f = x.len();
        let hidden: Vec<f64> = (0..self.hidden_size())
            .map(|j| {
                let row = &self.hidden_weight[j * f..(j + 1) * f];
                (self.hidden_bias[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        let z = self.out_bias + hidden.iter().zip(&self.out_weight).map(|(a, b)| a * b).sum::<f64>();
        Activations { hidden, z }
    }

    pub fn score_features(&self, features: &[f64]) -> f64 {
        let z = self.activations(&self.standardize(features)).z;
        SCORE_MIN + (SCORE_MAX - SCORE_MIN) * sigmoid(z)
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.hidden_weight.clone();
        v.extend_from_slice(&self.hidden_bias);
        v.extend_from_slice(&self.out_weight);
        v.push(self.out_bias);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (a, b) = (self.hidden_weight.len(), self.hidden_bias.len());
        self.hidden_weight.copy_from_slice(&v[..a]);
        self.hidden_bias.copy_from_slice(&v[a..a + b]);
        self.out_weight.copy_from_slice(&v[a + b..a + 2 * b]);
        self.out_bias = v[a + 2 * b];
    }

    /// Mean squared score error over standardized examples and its gradient.
    fn loss_and_grad(&self, xs: &[Vec<f64>], labels: &[f64]) -> (f64, Vec<f64>) {
        let f = self.feature_mean.len();
        let hs = self.hidden_size();
        let mut grad = vec![0.0; self.flat().len()];
        let mut loss = 0.0;
        let m = xs.len() as f64;
        for (x, &y) in xs.iter().zip(labels) {
            let act = self.activations(x);
            let s = sigmoid(act.z);
            let score = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * s;
            let r = score - y;
            loss += r * r / m;
            let dz = 2.0 * r / m * (SCORE_MAX - SCORE_MIN) * s * (1.0 - s);
            for j in 0..hs {
                let dh = dz * self.out_weight[j] * (1.0 - act.hidden[j] * act.hidden[j]);
                for k in 0..f {
                    grad[j * f + k] += dh * x[k];
                }
                grad[hs * f + j] += dh;
                grad[hs * f + hs + j] += dz * act.hidden[j];
            }
            grad[hs * f + 2 * hs] += dz;
        }
        (loss, grad)
    }

    fn fit(&mut self, examples: &[ScorerExample], epochs: usize, lr: f64) -> Result<f64> {
        let xs: Vec<Vec<f64>> = examples.iter().map(|e| self.standardize(&e.features)).collect();
        let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
        let mut flat = self.flat();
        let mut state = OptimizerState::new(flat.len());
        let opt = OptimizerConfig::adam(lr);
        let mut loss = f64::NAN;
        for _ in 0..epochs {
            let (l, g) = self.loss_and_grad(&xs, &labels);
            loss = l;
            apply_update(&mut flat, &g, &mut state, &opt)?;
            self.set_flat(&flat);
        }
        Ok(loss)
    }
}

/// Proxy quality score in `[1, 5]`.
pub fn iqa_reward(scorer: &ScorerParams, image: &Grid) -> Result<f64> {
    image.ensure_finite("scored image")?;
    let s = scorer.score_features(&quality_features(image));
    if !s.is_finite() {
        return Err(Error::NonFinite("proxy score".into()));
    }
    Ok(s)
}

/// Reference and degraded examples with their severity labels.
pub fn scorer_examples(pairs: &[RestorationPair]) -> Vec<ScorerExample> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                ScorerExample {
                    features: quality_features(&p.gt),
                    label: severity_label(0.0),
                },
                ScorerExample {
                    features: quality_features(&p.degraded),
                    label: severity_label(p.severity),
                },
            ]
        })
        .collect()
}

/// Spearman correlation between scores and negated severity (references count as severity 0).
pub fn severity_rank_correlation(scorer: &ScorerParams, pairs: &[RestorationPair]) -> Result<f64> {
    let mut scores = Vec::with_capacity(2 * pairs.len());
    let mut neg_sev = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        scores.push(iqa_reward(scorer, &p.gt)?);
        neg_sev.push(0.0);
        scores.push(iqa_reward(scorer, &p.degraded)?);
        neg_sev.push(-p.severity);
    }
    spearman(&scores, &neg_sev)
}

const SEVERITY_LEVEL_RESOLUTION: f64 = 1e-3;

pub fn train_quality_scorer<R: Rng + ?Sized>(
    train: &[RestorationPair],
    heldout: &[RestorationPair],
    config: &ScorerConfig,
    rng: &mut R,
) -> Result<ScorerParams> {
    let mut levels: Vec<i64> = train
        .iter()
        .map(|p| (p.severity / SEVERITY_LEVEL_RESOLUTION).round() as i64)
        .collect();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::invalid(format!(
            "scorer training needs at least 3 distinct severity levels, found {}",
            levels.len()
        )));
    }
    if config.hidden == 0 {
        return Err(Error::invalid("scorer hidden width must be positive"));
    }
    let examples = scorer_examples(train);
    let f = FEATURE_COUNT;
    let m = examples.len() as f64;
    let mut mean = vec![0.0; f];
    for e in &examples {
        for (a, v) in mean.iter_mut().zip(&e.features) {
            *a += v / m;
        }
    }
    let mut scale = vec![0.0; f];
    for e in &examples {
        for ((s, v), mu) in scale.iter_mut().zip(&e.features).zip(&mean) {
            *s += (v - mu).powi(2) / m;
        }
    }
    let scale: Vec<f64> = scale.iter().map(|v| v.sqrt().max(1e-6)).collect();

    let h = config.hidden;
    let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let hidden_weight = (0..h * f).map(|_| normal(1.0 / (f as f64).sqrt())).collect();
    let out_weight = (0..h).map(|_| normal(1.0 / (h as f64).sqrt())).collect();
    let mut params = ScorerParams {
        feature_mean: mean,
        feature_scale: scale,
        hidden_weight,
        hidden_bias: vec![0.0; h],
        out_weight,
        out_bias: 0.0,
        metadata: ScorerMetadata {
            label_scheme: LABEL_SCHEME.into(),
            epochs: config.epochs,
            train_examples: examples.len(),
            heldout_spearman: None,
            refreshes: 0,
        },
    };
    params.fit(&examples, config.epochs, config.lr)?;
    if !heldout.is_empty() {
        params.metadata.heldout_spearman = Some(severity_rank_correlation(&params, heldout)?);
    }
    Ok(params)
}

/// Least-squares map from residual RMSE to degradation severity, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityCalibration {
    pub slope: f64,
    pub intercept: f64,
}

impl SeverityCalibration {
    /// Fits on `(severity, rmse)` points.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("severity calibration needs at least two points"));
        }
        let n = points.len() as f64;
        let ms = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mr = points.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = points.iter().map(|(s, r)| (s - ms) * (r - mr)).sum();
        let var: f64 = points.iter().map(|(_, r)| (r - mr).powi(2)).sum();
        if var == 0.0 {
            return Err(Error::invalid("severity calibration needs varying residuals"));
        }
        let slope = cov / var;
        Ok(Self {
            slope,
            intercept: ms - slope * mr,
        })
    }

    /// Calibration points from each pair: the reference at severity 0 and the degraded image.
    pub fn from_pairs(pairs: &[RestorationPair]) -> Result<Self> {
        let mut pts = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            let rmse = (p.degraded.squared_distance(&p.gt)? / p.gt.len() as f64).sqrt();
            pts.push((0.0, 0.0));
            pts.push((p.severity, rmse));
        }
        Self::fit(&pts)
    }

    pub fn severity(&self, rmse: f64) -> f64 {
        (self.slope * rmse + self.intercept).clamp(0.0, 1.0)
    }
}

/// Relabels `(output, reference)` pairs by calibrated residual severity and fine-tunes
/// the scorer on them together with `base` examples.
pub fn refresh_scorer(
    scorer: &ScorerParams,
    base: &[ScorerExample],
    outputs: &[(Grid, Grid)],
    calibration: &SeverityCalibration,
    config: &ScorerConfig,
) -> Result<ScorerParams> {
    let mut examples = base.to_vec();
    for (y, g) in outputs {
        let rmse = (y.squared_distance(g)? / g.len() as f64).sqrt();
        examples.push(ScorerExample {
            features: quality_features(&y.clamp01()),
            label: severity_label(calibration.severity(rmse)),
        });
    }
    let mut next = scorer.clone();
    next.fit(&examples, config.refresh_epochs, config.lr)?;
    next.metadata.refreshes += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_pair, DatasetConfig, ProceduralScenes, RestorationPair};

    fn pair_at(severity: f64, index: usize) -> RestorationPair {
        let cfg = DatasetConfig {
            height: 16,
            width: 16,
            severity_min: severity,
            severity_max: severity,
            ..DatasetConfig::default()
        };
        generate_pair(&cfg, &ProceduralScenes, index).unwrap()
    }

    #[test]
    fn label_endpoints() {
        assert_eq!(severity_label(0.0), 5.0);
        assert_eq!(severity_label(1.0), 1.0);
    }

    #[test]
    fn feature_vector_has_fixed_length() {
        let g = Grid::filled(crate::grid::Shape::new(3, 8, 8), 0.5);
        let f = quality_features(&g);
        assert_eq!(f.len(), FEATURE_COUNT);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_levels_rejected() {
        let pairs: Vec<_> = (0..6)
            .map(|i| pair_at(if i % 2 == 0 { 0.4 } else { 0.8 }, i))
            .collect();
        let err = train_quality_scorer(&pairs, &[], &ScorerConfig::default(), &mut crate::rng::stream(0, 0));
        assert!(err.is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pairs: Vec<_> = (0..4).map(|i| pair_at(0.2 + 0.2 * i as f64, i)).collect();
        let cfg = ScorerConfig {
            epochs: 3,
            ..ScorerConfig::default()
        };
        let s = train_quality_scorer(&pairs, &[], &cfg, &mut crate::rng::stream(1, 0)).unwrap();
        let ex = scorer_examples(&pairs);
        let xs: Vec<Vec<f64>> = ex.iter().map(|e| s.standardize(&e.features)).collect();
        let ys: Vec<f64> = ex.iter().map(|e| e.label).collect();
        let (_, g) = s.loss_and_grad(&xs, &ys);
        let base = s.flat();
        for k in (0..base.len()).step_by(7) {
            let mut p = s.clone();
            let h = 1e-6;
            let mut v = base.clone();
            v[k] += h;
            p.set_flat(&v);
            let up = p.loss_and_grad(&xs, &ys).0;
            v[k] -= 2.0 * h;
            p.set_flat(&v);
            let down = p.loss_and_grad(&xs, &ys).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn calibration_inverts_a_line() {
        let c = SeverityCalibration::fit(&[(0.0, 0.0), (0.5, 0.1), (1.0, 0.2)]).unwrap();
        assert!((c.severity(0.1) - 0.5).abs() < 1e-12);
        assert_eq!(c.severity(10.0), 1.0);
    }
}
