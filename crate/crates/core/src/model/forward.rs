// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with capture and injection at hook sites.
//!
//! One routine serves every entry point. It processes the rows
//! `p0..n` of a sequence; rows before `p0` are only visible through their
//! stored keys and values. The full pass uses `p0 = 0`. The incremental
//! pass ([`PrefixState`]) recomputes just the last position on top of the
//! keys/values of an unpatched run, which is exact whenever every patch sits
//! at the last position (causal attention keeps earlier rows unchanged).
//! Because kernels are row-independent, both paths give bit-identical logits.

use std::collections::{HashMap, HashSet};

use super::config::{MlpKind, NormKind, ResidualVariant};
use super::hooks::{ActivationCache, HookSite, PatchSpec};
use super::ops::{self, NormStats, RotaryTable};
use super::weights::{LayerWeights, WeightBundle};
use crate::error::{FixlabError, Result};

/// Which activations to record.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub sites: HashSet<HookSite>,
    /// Record only the final position instead of every position.
    pub last_only: bool,
}

impl Capture {
    /// Capture `sites` at every position.
    pub fn all_positions(sites: impl IntoIterator<Item = HookSite>) -> Self {
        Self {
            sites: sites.into_iter().collect(),
            last_only: false,
        }
    }

    /// Capture `sites` at the final position only.
    pub fn last_position(sites: impl IntoIterator<Item = HookSite>) -> Self {
        Self {
            sites: sites.into_iter().collect(),
            last_only: true,
        }
    }

    fn wants(&self, site: HookSite, pos: usize, last: usize) -> bool {
        (!self.last_only || pos == last) && self.sites.contains(&site)
    }
}

/// Check the token sequence against the model.
pub fn validate_tokens(weights: &WeightBundle, tokens: &[u32]) -> Result<()> {
    let c = &weights.config;
    if tokens.is_empty() || tokens.len() > c.max_seq {
        return Err(FixlabError::SequenceLength {
            len: tokens.len(),
            max: c.max_seq,
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= c.vocab_size) {
        return Err(FixlabError::TokenOutOfRange {
            id,
            position,
            vocab: c.vocab_size,
        });
    }
    Ok(())
}

/// Final-position logits.
pub fn forward_logits(weights: &WeightBundle, tokens: &[u32]) -> Result<Vec<f32>> {
    Ok(run(weights, tokens, None, None)?.logits)
}

/// Final-position logits plus every requested site at every position.
pub fn forward_with_cache(
    weights: &WeightBundle,
    tokens: &[u32],
    sites: &[HookSite],
) -> Result<(Vec<f32>, ActivationCache)> {
    for s in sites {
        s.validate(&weights.config)?;
    }
    let capture = Capture::all_positions(sites.iter().copied());
    let out = run(weights, tokens, None, Some(&capture))?;
    Ok((out.logits, out.cache))
}

/// Final-position logits with activations replaced at the patched sites.
pub fn forward_with_patches(weights: &WeightBundle, tokens: &[u32], patches: &PatchSpec) -> Result<Vec<f32>> {
    Ok(run(weights, tokens, Some(patches), None)?.logits)
}

/// Patched forward pass that also records activations (post-injection).
pub fn forward_patched_with_capture(
    weights: &WeightBundle,
    tokens: &[u32],
    patches: &PatchSpec,
    capture: &Capture,
) -> Result<(Vec<f32>, ActivationCache)> {
    for s in &capture.sites {
        s.validate(&weights.config)?;
    }
    let out = run(weights, tokens, Some(patches), Some(capture))?;
    Ok((out.logits, out.cache))
}

/// Unpatched run of a prompt, retained so last-position patches can be
/// evaluated by recomputing a single row.
#[derive(Debug, Clone)]
pub struct PrefixState {
    tokens: Vec<u32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    /// Last-position residual after `l` blocks, `l = 0..=n_layers`.
    resid_last: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

impl PrefixState {
    pub fn new(weights: &WeightBundle, tokens: &[u32]) -> Result<Self> {
        validate_tokens(weights, tokens)?;
        let mut pass = Pass::full(weights, tokens, None, None);
        pass.keep_kv = true;
        let out = pass.execute()?;
        Ok(Self {
            tokens: tokens.to_vec(),
            keys: out.keys,
            values: out.values,
            resid_last: out.cache.layer_resid,
            logits: out.logits,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Unpatched final-position logits.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Logits with `patches` applied. Uses the single-row recompute when every
    /// patch is at the last position, otherwise falls back to a full pass.
    pub fn patched_logits(&self, weights: &WeightBundle, patches: &PatchSpec) -> Result<Vec<f32>> {
        Ok(self.patched_run(weights, patches, None)?.0)
    }

    /// Patched run with optional capture (captures are restricted to the last
    /// position on the single-row path).
    pub fn patched_run(
        &self,
        weights: &WeightBundle,
        patches: &PatchSpec,
        capture: Option<&Capture>,
    ) -> Result<(Vec<f32>, ActivationCache)> {
        let last = self.tokens.len() - 1;
        let single_row =
            !crate::exec::deterministic_mode() && patches.only_at(last) && capture.is_none_or(|c| c.last_only);
        if patches.is_empty() && capture.is_none() {
            let cache = ActivationCache {
                seq_len: self.tokens.len(),
                entries: HashMap::new(),
                layer_resid: self.resid_last.clone(),
                final_norm: final_norm_stats(weights, &self.resid_last[weights.config.n_layers]),
            };
            return Ok((self.logits.clone(), cache));
        }
        if !single_row {
            let out = run(weights, &self.tokens, Some(patches), capture)?;
            return Ok((out.logits, out.cache));
        }
        patches.validate(&weights.config, self.tokens.len())?;
        let start = patches.min_layer().unwrap_or(weights.config.n_layers);
        let start = match capture {
            Some(c) => c.sites.iter().map(|s| s.layer).min().map_or(start, |l| l.min(start)),
            None => start,
        };
        let mut pass = Pass {
            weights,
            tokens: &self.tokens,
            p0: last,
            start_layer: start,
            x: self.resid_last[start].clone(),
            patches: Some(patches),
            capture,
            prefix: Some(self),
            keep_kv: false,
        };
        let mut out = pass.execute()?;
        // layers before `start` were not recomputed
        for l in 0..start {
            out.cache.layer_resid[l] = self.resid_last[l].clone();
        }
        Ok((out.logits, out.cache))
    }
}

fn final_norm_stats(weights: &WeightBundle, x: &[f32]) -> NormStats {
    let mut out = vec![0.0; x.len()];
    ops::norm_row(
        x,
        &weights.final_norm_w,
        weights.final_norm_b.as_ref(),
        weights.config.layernorm_eps,
        weights.config.norm_kind == NormKind::Rmsnorm,
        &mut out,
    )
}

/// Apply the final norm and unembedding to one residual vector.
pub fn unembed_residual(weights: &WeightBundle, x: &[f32]) -> (Vec<f32>, NormStats) {
    let mut normed = vec![0.0; x.len()];
    let stats = ops::norm_row(
        x,
        &weights.final_norm_w,
        weights.final_norm_b.as_ref(),
        weights.config.layernorm_eps,
        weights.config.norm_kind == NormKind::Rmsnorm,
        &mut normed,
    );
    (ops::matmul_new(&normed, 1, &weights.unembed), stats)
}

struct RunOut {
    logits: Vec<f32>,
    cache: ActivationCache,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

fn run(
    weights: &WeightBundle,
    tokens: &[u32],
    patches: Option<&PatchSpec>,
    capture: Option<&Capture>,
) -> Result<RunOut> {
    validate_tokens(weights, tokens)?;
    if let Some(p) = patches {
        p.validate(&weights.config, tokens.len())?;
    }
    Pass::full(weights, tokens, patches, capture).execute()
}

struct Pass<'a> {
    weights: &'a WeightBundle,
    tokens: &'a [u32],
    /// First row recomputed.
    p0: usize,
    start_layer: usize,
    /// Residual rows `p0..n` entering `start_layer`.
    x: Vec<f32>,
    patches: Option<&'a PatchSpec>,
    capture: Option<&'a Capture>,
    prefix: Option<&'a PrefixState>,
    keep_kv: bool,
}

impl<'a> Pass<'a> {
    fn full(
        weights: &'a WeightBundle,
        tokens: &'a [u32],
        patches: Option<&'a PatchSpec>,
        capture: Option<&'a Capture>,
    ) -> Self {
        let d = weights.config.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (p, &t) in tokens.iter().enumerate() {
            let row = &mut x[p * d..(p + 1) * d];
            row.copy_from_slice(weights.embed.row(t as usize));
            if let Some(pe) = &weights.pos_embed {
                for (v, e) in row.iter_mut().zip(pe.row(p)) {
                    *v += e;
                }
            }
        }
        Self {
            weights,
            tokens,
            p0: 0,
            start_layer: 0,
            x,
            patches,
            capture,
            prefix: None,
            keep_kv: false,
        }
    }

    fn execute(&mut self) -> Result<RunOut> {
        let c = &self.weights.config;
        let (d, n) = (c.d_model, self.tokens.len());
        let last = n - 1;
        let m = n - self.p0;
        let rot = RotaryTable::new(c, n);
        let mut entries = HashMap::new();
        let mut layer_resid = vec![Vec::new(); c.n_layers + 1];
        layer_resid[self.start_layer] = self.x[(m - 1) * d..].to_vec();
        let mut keys = Vec::new();
        let mut values = Vec::new();

        for l in self.start_layer..c.n_layers {
            let lw = &self.weights.layers[l];
            self.inject(HookSite::resid_pre(l), &mut entries);
            let (attn, k, v) = self.attention(l, lw, &rot, &mut entries);
            let mut attn = attn;
            self.replace(HookSite::attn_out(l), &mut attn, &mut entries);

            let mlp_input: Vec<f32> = match c.residual_variant {
                ResidualVariant::Parallel => self.x.clone(),
                ResidualVariant::Sequential => self.x.iter().zip(&attn).map(|(a, b)| a + b).collect(),
            };
            let mut mlp = self.mlp(lw, &mlp_input, m);
            self.replace(HookSite::mlp_out(l), &mut mlp, &mut entries);

            for i in 0..m * d {
                self.x[i] = (self.x[i] + attn[i]) + mlp[i];
            }
            layer_resid[l + 1] = self.x[(m - 1) * d..].to_vec();
            if self.keep_kv {
                keys.push(k);
                values.push(v);
            }
        }

        let (logits, final_norm) = unembed_residual(self.weights, &self.x[(m - 1) * d..]);
        debug_assert_eq!(last + 1, n);
        Ok(RunOut {
            logits,
            cache: ActivationCache {
                seq_len: n,
                entries,
                layer_resid,
                final_norm,
            },
            keys,
            values,
        })
    }

    /// Overwrite row values at `site` with patches, then record captures.
    fn replace(&self, site: HookSite, rows: &mut [f32], entries: &mut HashMap<(HookSite, usize), Vec<f32>>) {
        let d = self.weights.config.d_model;
        let last = self.tokens.len() - 1;
        for (r, row) in rows.chunks_exact_mut(d).enumerate() {
            let pos = self.p0 + r;
            if let Some(v) = self.patches.and_then(|p| p.get(site, pos)) {
                row.copy_from_slice(v);
            }
            if self.capture.is_some_and(|c| c.wants(site, pos, last)) {
                entries.insert((site, pos), row.to_vec());
            }
        }
    }

    fn inject(&mut self, site: HookSite, entries: &mut HashMap<(HookSite, usize), Vec<f32>>) {
        let mut x = std::mem::take(&mut self.x);
        self.replace(site, &mut x, entries);
        self.x = x;
    }

    fn attention(
        &self,
        l: usize,
        lw: &LayerWeights,
        rot: &RotaryTable,
        entries: &mut HashMap<(HookSite, usize), Vec<f32>>,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let c = &self.weights.config;
        let (d, dh, nh) = (c.d_model, c.d_head, c.n_heads);
        let kvd = c.kv_dim();
        let n = self.tokens.len();
        let m = n - self.p0;
        let rms = c.norm_kind == NormKind::Rmsnorm;

        let h1 = ops::norm_rows(&self.x, d, &lw.ln1_w, lw.ln1_b.as_ref(), c.layernorm_eps, rms);
        let mut q = ops::matmul_new(&h1, m, &lw.q_w);
        ops::add_bias(&mut q, lw.q_b.as_ref());
        let mut k = ops::matmul_new(&h1, m, &lw.k_w);
        ops::add_bias(&mut k, lw.k_b.as_ref());
        let mut v = ops::matmul_new(&h1, m, &lw.v_w);
        ops::add_bias(&mut v, lw.v_b.as_ref());
        for r in 0..m {
            let pos = self.p0 + r;
            for h in 0..nh {
                rot.apply(&mut q[r * nh * dh + h * dh..r * nh * dh + (h + 1) * dh], pos);
            }
            for g in 0..c.n_kv_heads {
                rot.apply(&mut k[r * kvd + g * dh..r * kvd + (g + 1) * dh], pos);
            }
        }

        let (base_k, base_v): (&[f32], &[f32]) = match self.prefix {
            Some(p) => (&p.keys[l][..self.p0 * kvd], &p.values[l][..self.p0 * kvd]),
            None => (&[], &[]),
        };
        let key = |j: usize, g: usize| -> &[f32] {
            if j < self.p0 {
                &base_k[j * kvd + g * dh..j * kvd + (g + 1) * dh]
            } else {
                let r = j - self.p0;
                &k[r * kvd + g * dh..r * kvd + (g + 1) * dh]
            }
        };
        let value = |j: usize, g: usize| -> &[f32] {
            if j < self.p0 {
                &base_v[j * kvd + g * dh..j * kvd + (g + 1) * dh]
            } else {
                let r = j - self.p0;
                &v[r * kvd + g * dh..r * kvd + (g + 1) * dh]
            }
        };

        let scale = 1.0 / (dh as f32).sqrt();
        let group = c.group_size();
        // per-head z laid out [head][row][dh] so each head's rows are contiguous
        let mut z = vec![0.0f32; nh * m * dh];
        let mut scores = vec![0.0f32; n];
        for r in 0..m {
            let pos = self.p0 + r;
            for h in 0..nh {
                let g = h / group;
                let qh = &q[r * nh * dh + h * dh..r * nh * dh + (h + 1) * dh];
                let mut max = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(pos + 1) {
                    let kj = key(j, g);
                    let mut dot = 0.0f32;
                    for i in 0..dh {
                        dot += qh[i] * kj[i];
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0f32;
                for s in scores.iter_mut().take(pos + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let zh = &mut z[h * m * dh + r * dh..h * m * dh + (r + 1) * dh];
                for (j, s) in scores.iter().enumerate().take(pos + 1) {
                    let a = s / sum;
                    let vj = value(j, g);
                    for i in 0..dh {
                        zh[i] += a * vj[i];
                    }
                }
            }
        }

        let bias_share: Option<Vec<f32>> = lw.o_b.as_ref().map(|b| b.data.iter().map(|x| x / nh as f32).collect());
        let mut attn = vec![0.0f32; m * d];
        let mut head_out = vec![0.0f32; m * d];
        for h in 0..nh {
            let o_slice = &lw.o_w.data[h * dh * d..(h + 1) * dh * d];
            ops::matmul_raw(&z[h * m * dh..(h + 1) * m * dh], m, o_slice, dh, d, &mut head_out);
            if let Some(b) = &bias_share {
                for row in head_out.chunks_exact_mut(d) {
                    for (x, bv) in row.iter_mut().zip(b) {
                        *x += bv;
                    }
                }
            }
            self.replace(HookSite::head_out(l, h), &mut head_out, entries);
            for (a, hv) in attn.iter_mut().zip(&head_out) {
                *a += hv;
            }
        }
        (attn, k, v)
    }

    fn mlp(&self, lw: &LayerWeights, input: &[f32], m: usize) -> Vec<f32> {
        let c = &self.weights.config;
        let rms = c.norm_kind == NormKind::Rmsnorm;
        let h2 = ops::norm_rows(input, c.d_model, &lw.ln2_w, lw.ln2_b.as_ref(), c.layernorm_eps, rms);
        let mut hidden = ops::matmul_new(&h2, m, &lw.mlp_in_w);
        ops::add_bias(&mut hidden, lw.mlp_in_b.as_ref());
        match c.mlp_kind {
            MlpKind::Gelu => hidden.iter_mut().for_each(|v| *v = ops::gelu(*v)),
            MlpKind::Swiglu => {
                let gate_w = lw.mlp_gate_w.as_ref().expect("validated: swiglu has gate");
                let gate = ops::matmul_new(&h2, m, gate_w);
                for (u, g) in hidden.iter_mut().zip(&gate) {
                    *u *= ops::silu(*g);
                }
            }
        }
        let mut out = ops::matmul_new(&hidden, m, &lw.mlp_out_w);
        ops::add_bias(&mut out, lw.mlp_out_b.as_ref());
        out
    }
}
