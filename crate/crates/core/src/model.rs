//! Small conditional convolutional noise predictor.
//!
//! Input is the noisy grid channel-concatenated with the condition grid. Each
//! block is a 3x3 same-padded convolution plus a per-channel bias projected from
//! a sinusoidal timestep embedding, followed by SiLU. Blocks after the first are
//! residual. A final 3x3 convolution maps back to the image channels.
//!
//! Parameters live in one flat vector; [`ParamLayout`] names the slices.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub channels: usize,
    pub width: usize,
    /// Residual blocks after the input block.
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            width: 16,
            depth: 2,
            time_embed_dim: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 {
            return Err(Error::invalid("channels and width must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be a positive even number"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    cin: usize,
    cout: usize,
    weight: Range<usize>,
    bias: Range<usize>,
    time_weight: Range<usize>,
    time_bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    blocks: Vec<BlockLayout>,
    out_weight: Range<usize>,
    out_bias: Range<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let e = arch.time_embed_dim;
        let w = arch.width;
        let mut blocks = Vec::with_capacity(arch.depth + 1);
        for b in 0..=arch.depth {
            let cin = if b == 0 { 2 * arch.channels } else { w };
            blocks.push(BlockLayout {
                cin,
                cout: w,
                weight: take(w * cin * TAPS),
                bias: take(w),
                time_weight: take(w * e),
                time_bias: take(w),
            });
        }
        let out_weight = take(arch.channels * w * TAPS);
        let out_bias = take(arch.channels);
        Self {
            blocks,
            out_weight,
            out_bias,
            total: cursor,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchConfig,
    values: Vec<f64>,
}

pub fn init_model<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<ModelParams> {
    arch.validate()?;
    let layout = ParamLayout::new(&arch);
    let mut values = vec![0.0; layout.total];
    let mut fill = |range: &Range<usize>, scale: f64, rng: &mut R| {
        for v in &mut values[range.clone()] {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    };
    let e = arch.time_embed_dim as f64;
    for block in &layout.blocks {
        let fan_in = (block.cin * TAPS) as f64;
        fill(&block.weight, (2.0 / fan_in).sqrt(), rng);
        fill(&block.time_weight, 0.5 / e.sqrt(), rng);
    }
    fill(&layout.out_weight, 0.5 / ((arch.width * TAPS) as f64).sqrt(), rng);
    Ok(ModelParams { arch, values })
}

impl ModelParams {
    pub fn from_values(arch: ArchConfig, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} parameters"),
                actual: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_inputs(&self, x_t: &Grid, cond: &Grid) -> Result<Shape> {
        x_t.ensure_same_shape(cond)?;
        let shape = x_t.shape();
        if shape.channels != self.arch.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.arch.channels),
                actual: format!("{} channels", shape.channels),
            });
        }
        Ok(shape)
    }

    /// Noise estimate for `x_t` at model timestep `t`.
    pub fn forward(&self, x_t: &Grid, cond: &Grid, t: usize) -> Result<Grid> {
        self.forward_cached(x_t, cond, t).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x_t: &Grid, cond: &Grid, t: usize) -> Result<(Grid, ForwardCache)> {
        let shape = self.check_inputs(x_t, cond)?;
        let layout = ParamLayout::new(&self.arch);
        let (h, w) = (shape.height, shape.width);
        let plane = shape.plane();
        let temb = timestep_embedding(t, self.arch.time_embed_dim);

        let mut input = Vec::with_capacity(2 * x_t.len());
        input.extend_from_slice(x_t.data());
        input.extend_from_slice(cond.data());

        let mut block_inputs = Vec::with_capacity(layout.blocks.len());
        let mut pre_acts = Vec::with_capacity(layout.blocks.len());
        let mut current = input;
        for (b, block) in layout.blocks.iter().enumerate() {
            let mut z = vec![0.0; block.cout * plane];
            conv3x3_forward(
                &current,
                &self.values[block.weight.clone()],
                block.cin,
                block.cout,
                h,
                w,
                &mut z,
            );
            let shift = channel_shift(&self.values, block, &temb);
            for (o, plane_z) in z.chunks_exact_mut(plane).enumerate() {
                for v in plane_z.iter_mut() {
                    *v += shift[o];
                }
            }
            let next: Vec<f64> = if b == 0 {
                z.iter().map(|&v| silu(v)).collect()
            } else {
                current.iter().zip(&z).map(|(&r, &v)| r + silu(v)).collect()
            };
            block_inputs.push(std::mem::replace(&mut current, next));
            pre_acts.push(z);
        }

        let c = self.arch.channels;
        let mut out = vec![0.0; c * plane];
        conv3x3_forward(
            &current,
            &self.values[layout.out_weight.clone()],
            self.arch.width,
            c,
            h,
            w,
            &mut out,
        );
        let out_bias = &self.values[layout.out_bias.clone()];
        for (o, p) in out.chunks_exact_mut(plane).enumerate() {
            for v in p.iter_mut() {
                *v += out_bias[o];
            }
        }
        let cache = ForwardCache {
            shape,
            temb,
            block_inputs,
            pre_acts,
            head_input: current,
        };
        Ok((Grid::from_vec(shape, out)?, cache))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Grid, grads: &mut [f64]) -> Result<()> {
        if grad_out.shape() != cache.shape {
            return Err(Error::ShapeMismatch {
                expected: cache.shape.to_string(),
                actual: grad_out.shape().to_string(),
            });
        }
        if grads.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient slots", self.values.len()),
                actual: grads.len().to_string(),
            });
        }
        let layout = ParamLayout::new(&self.arch);
        let (h, w) = (cache.shape.height, cache.shape.width);
        let plane = cache.shape.plane();
        let c = self.arch.channels;
        let width = self.arch.width;

        let g = grad_out.data();
        for (o, p) in g.chunks_exact(plane).enumerate() {
            grads[layout.out_bias.start + o] += p.iter().sum::<f64>();
        }
        conv3x3_grad_weight(
            &cache.head_input,
            g,
            width,
            c,
            h,
            w,
            &mut grads[layout.out_weight.clone()],
        );
        let mut g_h = vec![0.0; width * plane];
        conv3x3_grad_input(&self.values[layout.out_weight.clone()], g, width, c, h, w, &mut g_h);

        for (b, block) in layout.blocks.iter().enumerate().rev() {
            let z = &cache.pre_acts[b];
            let g_z: Vec<f64> = g_h.iter().zip(z).map(|(&gh, &zv)| gh * silu_grad(zv)).collect();
            let e = cache.temb.len();
            for (o, p) in g_z.chunks_exact(plane).enumerate() {
                let s: f64 = p.iter().sum();
                grads[block.bias.start + o] += s;
                grads[block.time_bias.start + o] += s;
                let row = block.time_weight.start + o * e;
                for (k, te) in cache.temb.iter().enumerate() {
                    grads[row + k] += s * te;
                }
            }
            let input = &cache.block_inputs[b];
            conv3x3_grad_weight(
                input,
                &g_z,
                block.cin,
                block.cout,
                h,
                w,
                &mut grads[block.weight.clone()],
            );
            if b > 0 {
                // residual path passes g_h through unchanged
                let mut g_in = g_h;
                conv3x3_grad_input(
                    &self.values[block.weight.clone()],
                    &g_z,
                    block.cin,
                    block.cout,
                    h,
                    w,
                    &mut g_in,
                );
                g_h = g_in;
            }
        }
        Ok(())
    }
}

/// Activations retained by [`ModelParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape: Shape,
    temb: Vec<f64>,
    block_inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    head_input: Vec<f64>,
}

pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

fn channel_shift(values: &[f64], block: &BlockLayout, temb: &[f64]) -> Vec<f64> {
    let e = temb.len();
    let bias = &values[block.bias.clone()];
    let tb = &values[block.time_bias.clone()];
    let tw = &values[block.time_weight.clone()];
    (0..block.cout)
        .map(|o| {
            let proj: f64 = tw[o * e..(o + 1) * e].iter().zip(temb).map(|(a, b)| a * b).sum();
            bias[o] + tb[o] + proj
        })
        .collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Valid output columns `[x0, x1)` for horizontal tap offset `dx` in `-1..=1`.
#[inline]
fn col_span(dx: isize, w: usize) -> (usize, usize) {
    match dx {
        -1 => (1, w),
        0 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

#[inline]
fn row_span(dy: isize, h: usize) -> (usize, usize) {
    col_span(dy, h)
}

fn conv3x3_forward(input: &[f64], weight: &[f64], cin: usize, cout: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    for o in 0..cout {
        let out_p = &mut out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let in_p = &input[i * plane..(i + 1) * plane];
            let k = &weight[(o * cin + i) * TAPS..(o * cin + i + 1) * TAPS];
            for (tap, &wv) in k.iter().enumerate() {
                let dy = (tap / KERNEL) as isize - 1;
                let dx = (tap % KERNEL) as isize - 1;
                let (y0, y1) = row_span(dy, h);
                let (x0, x1) = col_span(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut out_p[y * w + x0..y * w + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let src = &in_p[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

fn conv3x3_grad_weight(input: &[f64], g_out: &[f64], cin: usize, cout: usize, h: usize, w: usize, gw: &mut [f64]) {
    let plane = h * w;
    for o in 0..cout {
        let g_p = &g_out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let in_p = &input[i * plane..(i + 1) * plane];
            for tap in 0..TAPS {
                let dy = (tap / KERNEL) as isize - 1;
                let dx = (tap % KERNEL) as isize - 1;
                let (y0, y1) = row_span(dy, h);
                let (x0, x1) = col_span(dx, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let gs = &g_p[y * w + x0..y * w + x1];
                    let src = &in_p[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    acc += gs.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
                gw[(o * cin + i) * TAPS + tap] += acc;
            }
        }
    }
}

fn conv3x3_grad_input(weight: &[f64], g_out: &[f64], cin: usize, cout: usize, h: usize, w: usize, g_in: &mut [f64]) {
    let plane = h * w;
    for o in 0..cout {
        let g_p = &g_out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let gi_p = &mut g_in[i * plane..(i + 1) * plane];
            let k = &weight[(o * cin + i) * TAPS..(o * cin + i + 1) * TAPS];
            for (tap, &wv) in k.iter().enumerate() {
                let dy = (tap / KERNEL) as isize - 1;
                let dx = (tap % KERNEL) as isize - 1;
                let (y0, y1) = row_span(dy, h);
                let (x0, x1) = col_span(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let gs = &g_p[y * w + x0..y * w + x1];
                    let dst = &mut gi_p[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, g) in dst.iter_mut().zip(gs) {
                        *d += wv * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            channels: 1,
            width: 4,
            depth: 1,
            time_embed_dim: 4,
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for arch in [tiny(), ArchConfig::default(), ArchConfig { channels: 3, width: 8, depth: 3, time_embed_dim: 8 }] {
            let (c, w, d, e) = (arch.channels, arch.width, arch.depth, arch.time_embed_dim);
            let first = 9 * 2 * c * w + w + e * w + w;
            let hidden = 9 * w * w + w + e * w + w;
            let head = 9 * w * c + c;
            let expected = first + d * hidden + head;
            let params = init_model(arch, &mut rng::stream(1, 0)).unwrap();
            assert_eq!(params.param_count(), expected);
        }
        assert_eq!(tiny().param_count(), 301);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(tiny(), &mut rng::stream(3, 0)).unwrap();
        let b = init_model(tiny(), &mut rng::stream(3, 0)).unwrap();
        assert_eq!(a, b);
        let c = init_model(tiny(), &mut rng::stream(4, 0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shape_matches_input_and_zero_input_is_finite() {
        let params = init_model(ArchConfig::default(), &mut rng::stream(1, 0)).unwrap();
        let shape = Shape::new(1, 8, 6);
        let zero = Grid::zeros(shape);
        let out = params.forward(&zero, &zero, 10).unwrap();
        assert_eq!(out.shape(), shape);
        out.ensure_finite("output").unwrap();
    }

    #[test]
    fn invalid_descriptor_rejected() {
        let arch = ArchConfig { time_embed_dim: 3, ..tiny() };
        assert!(init_model(arch, &mut rng::stream(0, 0)).is_err());
        let arch = ArchConfig { width: 0, ..tiny() };
        assert!(init_model(arch, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut params = init_model(tiny(), &mut rng::stream(5, 0)).unwrap();
        let shape = Shape::new(1, 5, 4);
        let mut r = rng::stream(5, 1);
        let x = Grid::standard_normal(shape, &mut r);
        let c = Grid::standard_normal(shape, &mut r);
        let probe = Grid::standard_normal(shape, &mut r);
        let loss = |p: &ModelParams| -> f64 {
            let out = p.forward(&x, &c, 7).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = params.forward_cached(&x, &c, 7).unwrap();
        let mut grads = params.zero_grad();
        params.backward(&cache, &probe, &mut grads).unwrap();
        let h = 1e-6;
        for i in 0..params.param_count() {
            let orig = params.values[i];
            params.values[i] = orig + h;
            let up = loss(&params);
            params.values[i] = orig - h;
            let down = loss(&params);
            params.values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: analytic {} vs fd {fd}", grads[i]);
        }
    }
}
