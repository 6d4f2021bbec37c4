//! Synthetic degradations.
//!
//! Severity `s` in `(0, 1]` drives one physical knob per task through a monotone map:
//!
//! | task          | knob                                                        |
//! |---------------|-------------------------------------------------------------|
//! | `lowlight`    | gamma `1 + 2.5 s`, gain `1 - 0.75 s`, noise var `0.01 s y + (0.005 s)^2` |
//! | `rain`        | streak count `round(s * H * W / 24)`, length `3 + round(6 s)`, brightness `0.25 + 0.35 s` |
//! | `motion_blur` | line-kernel length `1 + 2 round(3 s)`, random angle         |
//! | `defocus`     | disk radius `0.5 + 2.5 s`                                   |
//!
//! Every output is clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lowlight,
    Rain,
    MotionBlur,
    Defocus,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Lowlight, Task::Rain, Task::MotionBlur, Task::Defocus];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Lowlight => "lowlight",
            Task::Rain => "rain",
            Task::MotionBlur => "motion_blur",
            Task::Defocus => "defocus",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

pub fn degrade<R: Rng + ?Sized>(image: &Grid, task: Task, severity: f64, rng: &mut R) -> Result<Grid> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::invalid(format!("severity {severity} outside (0, 1]")));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("input image outside [0, 1]"));
    }
    let out = match task {
        Task::Lowlight => lowlight(image, severity, rng),
        Task::Rain => rain(image, severity, rng),
        Task::MotionBlur => {
            let length = 1 + 2 * (3.0 * severity).round() as usize;
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            convolve_replicate(image, &line_kernel(length, angle))
        }
        Task::Defocus => convolve_replicate(image, &disk_kernel(0.5 + 2.5 * severity)),
    };
    Ok(out.clamp01())
}

fn lowlight<R: Rng + ?Sized>(image: &Grid, s: f64, rng: &mut R) -> Grid {
    let gamma = 1.0 + 2.5 * s;
    let gain = 1.0 - 0.75 * s;
    let mut out = image.map(|v| gain * v.powf(gamma));
    for v in out.data_mut() {
        let var = 0.01 * s * *v + (0.005 * s).powi(2);
        let z: f64 = rng.sample(StandardNormal);
        *v += var.sqrt() * z;
    }
    out
}

fn rain<R: Rng + ?Sized>(image: &Grid, s: f64, rng: &mut R) -> Grid {
    let shape = image.shape();
    let (h, w) = (shape.height, shape.width);
    let count = (s * (h * w) as f64 / 24.0).round() as usize;
    let length = 3 + (6.0 * s).round() as usize;
    let brightness = 0.25 + 0.35 * s;
    // one dominant fall direction per image, measured from vertical
    let tilt: f64 = rng.random_range(-0.45..0.45);
    let (dx, dy) = (tilt.sin(), tilt.cos());
    let mut mask = vec![0.0f64; h * w];
    for _ in 0..count {
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        let strength = brightness * rng.random_range(0.7..1.0);
        let mut last = usize::MAX;
        for k in 0..(4 * length) {
            let u = k as f64 / 4.0;
            let (x, y) = (x0 + u * dx, y0 + u * dy);
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            let idx = y as usize * w + x as usize;
            if idx != last {
                mask[idx] = f64::max(mask[idx], strength);
                last = idx;
            }
        }
    }
    let mut out = image.clone();
    let plane = h * w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += mask[i % plane];
    }
    out
}

/// Odd-sized square kernel with entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Normalized line of `length` pixels through the centre at `angle` radians.
pub fn line_kernel(length: usize, angle: f64) -> Kernel {
    let size = length.max(1) | 1;
    let c = (size / 2) as f64;
    let mut weights = vec![0.0; size * size];
    let samples = 16 * size;
    let half = (length.max(1) as f64 - 1.0) / 2.0;
    for k in 0..samples {
        let u = if samples == 1 { 0.0 } else { -half + 2.0 * half * k as f64 / (samples - 1) as f64 };
        let (x, y) = (c + u * angle.cos(), c + u * angle.sin());
        // bilinear splat
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, wgt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (xi, yi) = (x0 as isize + ox, y0 as isize + oy);
            if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size && wgt > 0.0 {
                weights[yi as usize * size + xi as usize] += wgt;
            }
        }
    }
    normalize(size, weights)
}

/// Disk of the given radius, weights from 8x8 supersampled coverage.
pub fn disk_kernel(radius: f64) -> Kernel {
    let half = radius.ceil() as usize;
    let size = 2 * half + 1;
    let sub = 8;
    let mut weights = vec![0.0; size * size];
    for ky in 0..size {
        for kx in 0..size {
            let mut hits = 0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let px = kx as f64 - half as f64 - 0.5 + (sx as f64 + 0.5) / sub as f64;
                    let py = ky as f64 - half as f64 - 0.5 + (sy as f64 + 0.5) / sub as f64;
                    if px * px + py * py <= radius * radius {
                        hits += 1;
                    }
                }
            }
            weights[ky * size + kx] = hits as f64;
        }
    }
    normalize(size, weights)
}

fn normalize(size: usize, mut weights: Vec<f64>) -> Kernel {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    } else {
        weights[size * size / 2] = 1.0;
    }
    Kernel { size, weights }
}

/// Same-size convolution with replicated borders, applied per channel.
pub fn convolve_replicate(image: &Grid, kernel: &Kernel) -> Grid {
    let shape = image.shape();
    let (h, w) = (shape.height as isize, shape.width as isize);
    let r = (kernel.size / 2) as isize;
    let mut out = Grid::zeros(shape);
    for c in 0..shape.channels {
        let src = image.channel(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kernel.size as isize {
                    let sy = (y + ky - r).clamp(0, h - 1);
                    for kx in 0..kernel.size as isize {
                        let wgt = kernel.weights[(ky * kernel.size as isize + kx) as usize];
                        if wgt != 0.0 {
                            let sx = (x + kx - r).clamp(0, w - 1);
                            acc += wgt * src[(sy * w + sx) as usize];
                        }
                    }
                }
                out.set(c, y as usize, x as usize, acc);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scenes::procedural_scene;
    use crate::grid::Shape;
    use crate::metrics::psnr;

    #[test]
    fn kernels_sum_to_one() {
        for r in [0.5, 0.9, 1.7, 3.0] {
            let k = disk_kernel(r);
            // independent summation in reverse order
            let total: f64 = k.weights.iter().rev().fold(0.0, |a, b| a + b);
            assert!((total - 1.0).abs() < 1e-9);
        }
        for len in [1, 3, 7] {
            assert!((line_kernel(len, 0.7).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Grid::filled(Shape::new(1, 12, 12), 0.37);
        for task in [Task::MotionBlur, Task::Defocus] {
            let out = degrade(&img, task, 0.9, &mut crate::rng::stream(1, 0)).unwrap();
            for v in out.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_severity_is_near_identity() {
        let img = procedural_scene(Shape::new(1, 16, 16), &mut crate::rng::stream(2, 0));
        for task in Task::ALL {
            let out = degrade(&img, task, 1e-6, &mut crate::rng::stream(2, 1)).unwrap();
            let err = out.distance(&img).unwrap() / (img.len() as f64).sqrt();
            assert!(err < 1e-4, "{task}: rms {err}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let img = Grid::filled(Shape::new(1, 4, 4), 0.5);
        let mut rng = crate::rng::stream(0, 0);
        assert!(degrade(&img, Task::Rain, 0.0, &mut rng).is_err());
        assert!(degrade(&img, Task::Rain, 1.2, &mut rng).is_err());
        assert!(degrade(&Grid::filled(img.shape(), 1.5), Task::Rain, 0.5, &mut rng).is_err());
        assert!("snow".parse::<Task>().is_err());
        assert_eq!("motion_blur".parse::<Task>().unwrap(), Task::MotionBlur);
    }

    #[test]
    fn degradations_reduce_psnr_and_stay_in_range() {
        let mut rng = crate::rng::stream(3, 0);
        for i in 0..10 {
            let img = procedural_scene(Shape::new(1, 32, 32), &mut rng);
            for task in Task::ALL {
                for s in [0.2, 0.5, 1.0] {
                    let out = degrade(&img, task, s, &mut crate::rng::stream(3, i)).unwrap();
                    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                    let p = psnr(&out, &img, 1.0).unwrap();
                    assert!(p < psnr(&img, &img, 1.0).unwrap(), "{task} s={s}");
                }
            }
        }
    }
}
