// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared test oracles. Everything here is deliberately naive: f64
//! arithmetic, explicit loops, no caching, no shared kernels with the crate.

#![allow(dead_code, clippy::needless_range_loop)]

use fixlab_core::model::{MlpKind, ModelConfig, NormKind, Positional, ResidualVariant, Tensor, WeightBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    f64::from(t.data[r * t.shape[1] + c])
}

fn vec_of(t: Option<&Tensor>, n: usize) -> Vec<f64> {
    t.map_or(vec![0.0; n], |t| t.data.iter().map(|&v| f64::from(v)).collect())
}

fn norm(x: &[f64], w: &Tensor, b: Option<&Tensor>, eps: f64, kind: NormKind) -> Vec<f64> {
    let n = x.len() as f64;
    let (mean, var) = match kind {
        NormKind::Layernorm => {
            let m = x.iter().sum::<f64>() / n;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        }
        NormKind::Rmsnorm => (0.0, x.iter().map(|v| v * v).sum::<f64>() / n),
    };
    let bias = vec_of(b, x.len());
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * f64::from(w.data[i]) + bias[i])
        .collect()
}

/// `x · W + b` for a single row.
fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let cols = w.shape[1];
    let mut out = vec_of(b, cols);
    for (c, o) in out.iter_mut().enumerate() {
        for (r, xv) in x.iter().enumerate() {
            *o += xv * at(w, r, c);
        }
    }
    out
}

fn inv_freqs(c: &ModelConfig) -> Vec<f64> {
    let Positional::Rotary {
        rotary_fraction,
        base,
        scaling,
    } = c.positional
    else {
        return Vec::new();
    };
    let rd = (rotary_fraction * c.d_head as f64).round() as usize;
    (0..rd / 2)
        .map(|i| {
            let f = base.powf(-(2.0 * i as f64) / rd as f64);
            let Some(s) = scaling else { return f };
            let wavelen = 2.0 * std::f64::consts::PI / f;
            if wavelen < s.original_max_position / s.high_freq_factor {
                f
            } else if wavelen > s.original_max_position / s.low_freq_factor {
                f / s.factor
            } else {
                let t =
                    (s.original_max_position / wavelen - s.low_freq_factor) / (s.high_freq_factor - s.low_freq_factor);
                (1.0 - t) * f / s.factor + t * f
            }
        })
        .collect()
}

/// Rotate-half rotation of the leading `2·freqs.len()` dims.
fn rotate(v: &mut [f64], pos: usize, freqs: &[f64]) {
    let h = freqs.len();
    let orig = v.to_vec();
    for (i, f) in freqs.iter().enumerate() {
        let (s, co) = (pos as f64 * f).sin_cos();
        v[i] = orig[i] * co - orig[i + h] * s;
        v[i + h] = orig[i + h] * co + orig[i] * s;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Reference forward pass; returns final-position logits.
pub fn reference_logits(w: &WeightBundle, tokens: &[u32]) -> Vec<f64> {
    let c = &w.config;
    let (d, dh, nh) = (c.d_model, c.d_head, c.n_heads);
    let eps = f64::from(c.layernorm_eps);
    let freqs = inv_freqs(c);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|i| at(&w.embed, t as usize, i) + w.pos_embed.as_ref().map_or(0.0, |pe| at(pe, p, i)))
                .collect()
        })
        .collect();
    for lw in &w.layers {
        let h1: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| norm(x, &lw.ln1_w, lw.ln1_b.as_ref(), eps, c.norm_kind))
            .collect();
        let mut q: Vec<Vec<f64>> = h1.iter().map(|h| affine(h, &lw.q_w, lw.q_b.as_ref())).collect();
        let mut k: Vec<Vec<f64>> = h1.iter().map(|h| affine(h, &lw.k_w, lw.k_b.as_ref())).collect();
        let v: Vec<Vec<f64>> = h1.iter().map(|h| affine(h, &lw.v_w, lw.v_b.as_ref())).collect();
        for p in 0..tokens.len() {
            for h in 0..nh {
                rotate(&mut q[p][h * dh..(h + 1) * dh], p, &freqs);
            }
            for g in 0..c.n_kv_heads {
                rotate(&mut k[p][g * dh..(g + 1) * dh], p, &freqs);
            }
        }
        let group = nh / c.n_kv_heads;
        let mut attn = Vec::with_capacity(tokens.len());
        for p in 0..tokens.len() {
            let mut z = vec![0.0; nh * dh];
            for h in 0..nh {
                let g = h / group;
                let scores: Vec<f64> = (0..=p)
                    .map(|j| (0..dh).map(|i| q[p][h * dh + i] * k[j][g * dh + i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let zsum: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for i in 0..dh {
                        z[h * dh + i] += ej / zsum * v[j][g * dh + i];
                    }
                }
            }
            attn.push(affine(&z, &lw.o_w, lw.o_b.as_ref()));
        }
        for p in 0..tokens.len() {
            let mlp_in: Vec<f64> = match c.residual_variant {
                ResidualVariant::Parallel => xs[p].clone(),
                ResidualVariant::Sequential => xs[p].iter().zip(&attn[p]).map(|(a, b)| a + b).collect(),
            };
            let h2 = norm(&mlp_in, &lw.ln2_w, lw.ln2_b.as_ref(), eps, c.norm_kind);
            let mut hid = affine(&h2, &lw.mlp_in_w, lw.mlp_in_b.as_ref());
            match c.mlp_kind {
                MlpKind::Gelu => hid.iter_mut().for_each(|x| *x = gelu(*x)),
                MlpKind::Swiglu => {
                    let gate = affine(&h2, lw.mlp_gate_w.as_ref().unwrap(), None);
                    for (u, g) in hid.iter_mut().zip(gate) {
                        *u *= g / (1.0 + (-g).exp());
                    }
                }
            }
            let mlp = affine(&hid, &lw.mlp_out_w, lw.mlp_out_b.as_ref());
            for i in 0..d {
                xs[p][i] += attn[p][i] + mlp[i];
            }
        }
    }
    let last = norm(
        xs.last().unwrap(),
        &w.final_norm_w,
        w.final_norm_b.as_ref(),
        eps,
        c.norm_kind,
    );
    affine(&last, &w.unembed, None)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - y).abs())
        .fold(0.0, f64::max)
}

/// Random token sequences of length `min..=max`.
pub fn random_prompts(n: usize, vocab: usize, min: usize, max: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(min..=max);
            (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
        })
        .collect()
}

/// Toy config with learned absolute positions instead of rotary.
pub fn toy_learned(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.positional = Positional::Learned;
    c.max_seq = 64;
    c
}

/// Exact binomial coefficient as f64 (small arguments only).
pub fn choose(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Average ranks (1-based) computed by pairwise comparison.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Signed-rank p-values `(greater, less, two_sided)` by enumerating all
/// `2^n` sign assignments of the nonzero differences.
pub fn wilcoxon_enumerated(diffs: &[f64]) -> (f64, f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let ranks = naive_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let obs: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        ge += u64::from(w >= obs - 1e-9);
        le += u64::from(w <= obs + 1e-9);
    }
    let all = (1u64 << n) as f64;
    let (g, l) = (ge as f64 / all, le as f64 / all);
    (g, l, (2.0 * g.min(l)).min(1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn naive_spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson(&naive_ranks(x), &naive_ranks(y))
}

/// Heap's algorithm over all permutations of `y`; returns the fraction
/// whose rho is at least (`sign = 1`), at most (`sign = -1`) or at least as
/// extreme in absolute value (`sign = 0`) as the observed one.
pub fn spearman_permutation_p(x: &[f64], y: &[f64], sign: i32) -> f64 {
    let rx = naive_ranks(x);
    let mut ry = naive_ranks(y);
    let obs = pearson(&rx, &ry);
    let hit = |r: f64| match sign {
        1 => r >= obs - 1e-9,
        -1 => r <= obs + 1e-9,
        _ => r.abs() >= obs.abs() - 1e-9,
    };
    let n = ry.len();
    let mut c = vec![0usize; n];
    let (mut hits, mut total) = (u64::from(hit(obs)), 1u64);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            total += 1;
            hits += u64::from(hit(pearson(&rx, &ry)));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Exact distribution of the pooled mean over every ordered resample of the
/// clusters, as `(value, probability)` sorted by value.
pub fn exhaustive_cluster_resamples(clusters: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let k = clusters.len();
    let total = k.pow(k as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let (mut sum, mut n, mut c) = (0.0, 0usize, code);
        for _ in 0..k {
            let pick = &clusters[c % k];
            c /= k;
            sum += pick.iter().sum::<f64>();
            n += pick.len();
        }
        out.push((sum / n as f64, 1.0 / total as f64));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Smallest value whose cumulative probability reaches `q`.
pub fn discrete_quantile(dist: &[(f64, f64)], q: f64) -> f64 {
    let mut acc = 0.0;
    for &(v, p) in dist {
        acc += p;
        if acc >= q - 1e-12 {
            return v;
        }
    }
    dist.last().unwrap().0
}
