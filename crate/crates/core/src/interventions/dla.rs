// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit attribution with frozen final-norm statistics.

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::model::{forward_with_cache, ActivationCache, HookSite, NormKind, SiteKind, WeightBundle};

use super::patching::check_pair_tokens;

/// Contributions to `logit(target) - logit(foil)` at the final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlaReport {
    pub embed: f64,
    /// `[layer][head]`.
    pub heads: Vec<Vec<f64>>,
    pub mlps: Vec<f64>,
    /// Final-norm bias projected on the direction (constant term).
    pub norm_bias: f64,
    /// Logit difference from the forward pass.
    pub logit_diff: f64,
}

impl DlaReport {
    pub fn total(&self) -> f64 {
        self.embed + self.heads.iter().flatten().sum::<f64>() + self.mlps.iter().sum::<f64>() + self.norm_bias
    }

    /// Head contributions as `(layer, head, value)` sorted by value descending.
    pub fn ranked_heads(&self) -> Vec<(usize, usize, f64)> {
        let mut v: Vec<(usize, usize, f64)> = self
            .heads
            .iter()
            .enumerate()
            .flat_map(|(l, hs)| hs.iter().enumerate().map(move |(h, &x)| (l, h, x)))
            .collect();
        v.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        v
    }
}

/// Sites DLA needs in the cache.
pub fn dla_sites(weights: &WeightBundle) -> Vec<HookSite> {
    let mut s = HookSite::all_of_kind(&weights.config, SiteKind::HeadOut);
    s.extend(HookSite::all_of_kind(&weights.config, SiteKind::MlpOut));
    s
}

/// Attribute the final-position logit difference over a cache holding
/// `head_out` and `mlp_out` at the last position of every layer.
pub fn dla(weights: &WeightBundle, cache: &ActivationCache, target: u32, foil: u32) -> Result<DlaReport> {
    check_pair_tokens(weights, target, foil)?;
    let c = &weights.config;
    let d = c.d_model;
    let last = cache.seq_len() - 1;
    let stats = cache.final_norm_stats();
    let rms = c.norm_kind == NormKind::Rmsnorm;
    let u = &weights.unembed;
    // direction folded with the norm scale and frozen rstd
    let dir: Vec<f64> = (0..d)
        .map(|i| {
            let ud = f64::from(u.data[i * c.vocab_size + target as usize])
                - f64::from(u.data[i * c.vocab_size + foil as usize]);
            ud * f64::from(weights.final_norm_w.data[i]) * f64::from(stats.rstd)
        })
        .collect();
    let project = |v: &[f32]| -> f64 {
        let mean = if rms {
            0.0
        } else {
            v.iter().map(|&x| f64::from(x)).sum::<f64>() / d as f64
        };
        v.iter().zip(&dir).map(|(&x, w)| (f64::from(x) - mean) * w).sum()
    };
    let need = |s: HookSite| {
        cache
            .get(s, last)
            .ok_or_else(|| FixlabError::IncompleteCache(format!("{s} at position {last}")))
    };
    let mut heads = Vec::with_capacity(c.n_layers);
    let mut mlps = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        heads.push(
            (0..c.n_heads)
                .map(|h| need(HookSite::head_out(l, h)).map(project))
                .collect::<Result<Vec<f64>>>()?,
        );
        mlps.push(project(need(HookSite::mlp_out(l))?));
    }
    let norm_bias = weights.final_norm_b.as_ref().map_or(0.0, |b| {
        (0..d)
            .map(|i| {
                f64::from(b.data[i])
                    * (f64::from(u.data[i * c.vocab_size + target as usize])
                        - f64::from(u.data[i * c.vocab_size + foil as usize]))
            })
            .sum()
    });
    let (logits, _) = crate::model::unembed_residual(weights, cache.layer_residual(c.n_layers));
    Ok(DlaReport {
        embed: project(cache.layer_residual(0)),
        heads,
        mlps,
        norm_bias,
        logit_diff: f64::from(logits[target as usize]) - f64::from(logits[foil as usize]),
    })
}

/// Run the model and attribute in one step.
pub fn dla_for_tokens(weights: &WeightBundle, tokens: &[u32], target: u32, foil: u32) -> Result<DlaReport> {
    let sites = dla_sites(weights);
    let (_, cache) = forward_with_cache(weights, tokens, &sites)?;
    dla(weights, &cache, target, foil)
}

/// Elementwise `a - b` (e.g. GP minus control).
pub fn dla_delta(a: &DlaReport, b: &DlaReport) -> DlaReport {
    DlaReport {
        embed: a.embed - b.embed,
        heads: a
            .heads
            .iter()
            .zip(&b.heads)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
            .collect(),
        mlps: a.mlps.iter().zip(&b.mlps).map(|(p, q)| p - q).collect(),
        norm_bias: a.norm_bias - b.norm_bias,
        logit_diff: a.logit_diff - b.logit_diff,
    }
}

/// Mean of several reports (e.g. over items).
pub fn dla_mean(reports: &[DlaReport]) -> Result<DlaReport> {
    let first = reports
        .first()
        .ok_or_else(|| FixlabError::Intervention("no DLA reports".into()))?;
    let n = reports.len() as f64;
    let mut acc = dla_delta(first, first);
    for r in reports {
        acc.embed += r.embed / n;
        acc.norm_bias += r.norm_bias / n;
        acc.logit_diff += r.logit_diff / n;
        for (a, x) in acc.mlps.iter_mut().zip(&r.mlps) {
            *a += x / n;
        }
        for (ah, xh) in acc.heads.iter_mut().zip(&r.heads) {
            for (a, x) in ah.iter_mut().zip(xh) {
                *a += x / n;
            }
        }
    }
    Ok(acc)
}
