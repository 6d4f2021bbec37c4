//! Full-reference fidelity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Value reported when the two images are identical.
pub const PSNR_CEILING_DB: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CEILING_DB`].
pub fn psnr(a: &Grid, b: &Grid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let mse = a.squared_distance(b)? / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CEILING_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CEILING_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimWindow {
    /// Side of the square uniform window.
    pub size: usize,
    /// Dynamic range of the pixel values.
    pub range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self {
            size: 7,
            range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean SSIM over every fully-contained `size x size` window of every channel,
/// with stabilizers `C1 = (k1 L)^2` and `C2 = (k2 L)^2`.
pub fn ssim(a: &Grid, b: &Grid, window: &SsimWindow) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let shape = a.shape();
    let n = window.size;
    if n == 0 || shape.height < n || shape.width < n {
        return Err(Error::invalid(format!(
            "image {shape} smaller than the {n}x{n} ssim window"
        )));
    }
    let c1 = (window.k1 * window.range).powi(2);
    let c2 = (window.k2 * window.range).powi(2);
    let count = (n * n) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..shape.channels {
        let pa = a.channel(c);
        let pb = b.channel(c);
        for y0 in 0..=shape.height - n {
            for x0 in 0..=shape.width - n {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + n {
                    for x in x0..x0 + n {
                        let (va, vb) = (pa[y * shape.width + x], pb[y * shape.width + x]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                let var_a = (saa / count - ma * ma).max(0.0);
                let var_b = (sbb / count - mb * mb).max(0.0);
                let cov = sab / count - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}
