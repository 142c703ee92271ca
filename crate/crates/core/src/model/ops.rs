// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 kernels used by the forward pass.
//!
//! Every output row of [`matmul`] is accumulated over the inner dimension in
//! ascending order regardless of how many rows are processed together, so a
//! row computed alone is bit-identical to the same row computed in a batch.
//! The incremental last-position path relies on this.

use super::config::{ModelConfig, Positional, RopeScaling};
use super::weights::Tensor;

const ROW_BLOCK: usize = 8;

/// `out[r] = x[r] · w` for each of the `rows` rows of `x` (`w` is `[k, n]`).
pub fn matmul(x: &[f32], rows: usize, w: &Tensor, out: &mut [f32]) {
    matmul_raw(x, rows, &w.data, w.shape[0], w.shape[1], out);
}

/// [`matmul`] over a raw row-major `[k, n]` slice.
pub fn matmul_raw(x: &[f32], rows: usize, w: &[f32], k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(out.len(), rows * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(rows);
        for kk in 0..k {
            let wrow = &w[kk * n..(kk + 1) * n];
            for r in r0..r1 {
                let a = x[r * k + kk];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[r * n..(r + 1) * n];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
    }
}

/// Allocate-and-multiply convenience wrapper.
pub fn matmul_new(x: &[f32], rows: usize, w: &Tensor) -> Vec<f32> {
    let mut out = vec![0.0; rows * w.shape[1]];
    matmul(x, rows, w, &mut out);
    out
}

/// Add `bias` to every row of `x`.
pub fn add_bias(x: &mut [f32], bias: Option<&Tensor>) {
    if let Some(b) = bias {
        let n = b.data.len();
        for row in x.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
}

/// Per-row statistics of a normalization, kept so DLA can freeze them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    /// Row mean (zero for RMSNorm).
    pub mean: f32,
    /// Reciprocal of the (root-mean-square) scale.
    pub rstd: f32,
}

/// Normalize one row into `out`, returning the statistics used.
pub fn norm_row(x: &[f32], weight: &Tensor, bias: Option<&Tensor>, eps: f32, rms: bool, out: &mut [f32]) -> NormStats {
    let n = x.len() as f32;
    let stats = if rms {
        let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
        NormStats {
            mean: 0.0,
            rstd: 1.0 / (ms + eps).sqrt(),
        }
    } else {
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        NormStats {
            mean,
            rstd: 1.0 / (var + eps).sqrt(),
        }
    };
    apply_norm(x, stats, weight, bias, out);
    stats
}

/// Apply a normalization with given (possibly frozen) statistics.
pub fn apply_norm(x: &[f32], stats: NormStats, weight: &Tensor, bias: Option<&Tensor>, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (x[i] - stats.mean) * stats.rstd * weight.data[i];
    }
    if let Some(b) = bias {
        for (o, bv) in out.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
}

/// Normalize each of the rows of `x`.
pub fn norm_rows(x: &[f32], d: usize, weight: &Tensor, bias: Option<&Tensor>, eps: f32, rms: bool) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        norm_row(xr, weight, bias, eps, rms, or);
    }
    out
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// SiLU, `x·σ(x)`.
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Probability of selected ids under the full-vocabulary softmax.
pub fn probs_of(logits: &[f32], ids: &[u32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    ids.iter()
        .map(|&i| (logits[i as usize] as f64 - max).exp() / z)
        .collect()
}

/// Inverse frequencies for the rotating pairs of one head.
pub fn rotary_inv_freq(config: &ModelConfig) -> Vec<f64> {
    let Positional::Rotary { base, scaling, .. } = config.positional else {
        return Vec::new();
    };
    let dims = config.rotary_dims();
    let mut inv: Vec<f64> = (0..dims / 2)
        .map(|i| 1.0 / base.powf(2.0 * i as f64 / dims as f64))
        .collect();
    if let Some(s) = scaling {
        scale_llama3(&mut inv, s);
    }
    inv
}

fn scale_llama3(inv: &mut [f64], s: RopeScaling) {
    let low_wavelen = s.original_max_position / s.low_freq_factor;
    let high_wavelen = s.original_max_position / s.high_freq_factor;
    for f in inv.iter_mut() {
        let wavelen = 2.0 * std::f64::consts::PI / *f;
        if wavelen < high_wavelen {
            continue;
        }
        if wavelen > low_wavelen {
            *f /= s.factor;
        } else {
            let smooth =
                (s.original_max_position / wavelen - s.low_freq_factor) / (s.high_freq_factor - s.low_freq_factor);
            *f = (1.0 - smooth) * *f / s.factor + smooth * *f;
        }
    }
}

/// Cos/sin table for positions `0..n`, laid out `[pos][pair]`.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    pub pairs: usize,
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

impl RotaryTable {
    pub fn new(config: &ModelConfig, n: usize) -> Self {
        let inv = rotary_inv_freq(config);
        let pairs = inv.len();
        let mut cos = Vec::with_capacity(n * pairs);
        let mut sin = Vec::with_capacity(n * pairs);
        for p in 0..n {
            for f in &inv {
                let a = p as f64 * f;
                cos.push(a.cos() as f32);
                sin.push(a.sin() as f32);
            }
        }
        Self { pairs, cos, sin }
    }

    /// Rotate the first `2·pairs` dims of one head vector (rotate-half convention).
    pub fn apply(&self, v: &mut [f32], pos: usize) {
        let h = self.pairs;
        if h == 0 {
            return;
        }
        let c = &self.cos[pos * h..(pos + 1) * h];
        let s = &self.sin[pos * h..(pos + 1) * h];
        for i in 0..h {
            let x1 = v[i];
            let x2 = v[i + h];
            v[i] = x1 * c[i] - x2 * s[i];
            v[i + h] = x2 * c[i] + x1 * s[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_rows_are_batch_independent() {
        let w = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f32 * 0.37).sin()).collect());
        let x: Vec<f32> = (0..33).map(|i| (i as f32 * 0.11).cos()).collect();
        let all = matmul_new(&x, 11, &w);
        for r in 0..11 {
            let one = matmul_new(&x[r * 3..(r + 1) * 3], 1, &w);
            assert_eq!(one, all[r * 5..(r + 1) * 5].to_vec());
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let w = Tensor::new(vec![4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        let x = [1., 0., -1., 2.];
        assert_eq!(matmul_new(&x, 1, &w), vec![1. - 5. + 14., 2. - 6. + 16.]);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let w = Tensor::filled(vec![4], 1.0);
        let mut out = [0.0; 4];
        norm_row(&x, &w, None, 1e-12, false, &mut out);
        let mean: f32 = out.iter().sum::<f32>() / 4.0;
        let var: f32 = out.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158_655_3).abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -100.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = probs_of(&[1.0, 2.0, 3.0, -100.0], &[2, 0]);
        assert!((q[0] - p[2]).abs() < 1e-15);
        assert!((q[1] - p[0]).abs() < 1e-15);
    }

    #[test]
    fn rotation_preserves_norm() {
        let c = ModelConfig::toy(10);
        let t = RotaryTable::new(&c, 20);
        let mut v: Vec<f32> = (0..16).map(|i| i as f32 - 7.5).collect();
        let before: f32 = v.iter().map(|x| x * x).sum();
        t.apply(&mut v, 13);
        let after: f32 = v.iter().map(|x| x * x).sum();
        assert!((before - after).abs() < 1e-3);
        // position 0 is the identity
        let mut w: Vec<f32> = (0..16).map(|i| i as f32).collect();
        t.apply(&mut w, 0);
        assert_eq!(w, (0..16).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn llama3_scaling_only_touches_low_frequencies() {
        let c = ModelConfig::toy_llama(10);
        let scaled = rotary_inv_freq(&c);
        let mut plain = c.clone();
        plain.positional = Positional::Rotary {
            rotary_fraction: 1.0,
            base: 500_000.0,
            scaling: None,
        };
        let unscaled = rotary_inv_freq(&plain);
        assert_eq!(scaled[0], unscaled[0]);
        let last = scaled.len() - 1;
        assert!((scaled[last] - unscaled[last] / 32.0).abs() < 1e-15);
    }
}
