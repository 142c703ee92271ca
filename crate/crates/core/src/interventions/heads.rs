// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head patching, cumulative joint head patching and zero-ablation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::model::{forward_with_patches, HookSite, PatchSpec, SiteKind, WeightBundle};

use super::patching::PreparedPair;
use super::recovery::{mean_recovery, RecoveryResult};

/// Recovery from patching one head alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadResult {
    pub layer: usize,
    pub head: usize,
    pub mean: Option<f64>,
    pub n_items: usize,
    pub n_excluded: usize,
    pub recoveries: Vec<RecoveryResult>,
}

impl HeadResult {
    pub fn site(&self) -> HookSite {
        HookSite::head_out(self.layer, self.head)
    }

    /// `L10-H5` style label.
    pub fn id(&self) -> String {
        format!("L{}-H{}", self.layer, self.head)
    }
}

/// One point of the cumulative curve: the top `k` heads patched jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub k: usize,
    pub heads: Vec<(usize, usize)>,
    pub mean: Option<f64>,
    pub n_excluded: usize,
    pub recoveries: Vec<RecoveryResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPatchReport {
    pub ranking: Vec<HeadResult>,
    /// Points for `k = 0..=max_k`.
    pub curve: Vec<CumulativePoint>,
}

fn by_mean_then_index(a: &HeadResult, b: &HeadResult) -> Ordering {
    match (a.mean, b.mean) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| (a.layer, a.head).cmp(&(b.layer, b.head)))
}

fn require_items(prepared: &[PreparedPair]) -> Result<()> {
    if prepared.is_empty() {
        Err(FixlabError::Intervention("no items to patch".into()))
    } else {
        Ok(())
    }
}

/// Rank every head by its individual mean recovery. `prepared` must hold
/// `head_out` control activations.
pub fn rank_heads(weights: &WeightBundle, prepared: &[PreparedPair], exec: Exec) -> Result<Vec<HeadResult>> {
    require_items(prepared)?;
    let sites = HookSite::all_of_kind(&weights.config, SiteKind::HeadOut);
    let mut out = exec.try_map(&sites, |&s| {
        let recs = prepared
            .iter()
            .map(|p| p.patch(weights, &[s]))
            .collect::<Result<Vec<_>>>()?;
        let (mean, n_excluded) = mean_recovery(&recs);
        Ok::<_, FixlabError>(HeadResult {
            layer: s.layer,
            head: s.head.unwrap_or_default(),
            mean,
            n_items: recs.len(),
            n_excluded,
            recoveries: recs,
        })
    })?;
    out.sort_by(by_mean_then_index);
    Ok(out)
}

/// Joint patch of the given heads for every item.
pub fn joint_head_patch(
    weights: &WeightBundle,
    prepared: &[PreparedPair],
    heads: &[(usize, usize)],
    exec: Exec,
) -> Result<Vec<RecoveryResult>> {
    let sites: Vec<HookSite> = heads.iter().map(|&(l, h)| HookSite::head_out(l, h)).collect();
    for s in &sites {
        s.validate(&weights.config)?;
    }
    exec.try_map(prepared, |p| {
        if sites.is_empty() {
            // nothing patched: p_patched = p_gp
            Ok(RecoveryResult::new(p.p_gp, p.p_ctrl, p.p_gp))
        } else {
            p.patch(weights, &sites)
        }
    })
}

/// Rank heads individually, then re-evaluate the joint top-`k` patch for
/// each `k` up to `max_k` (all heads when `None`).
pub fn cumulative_head_patch(
    weights: &WeightBundle,
    prepared: &[PreparedPair],
    max_k: Option<usize>,
    exec: Exec,
) -> Result<HeadPatchReport> {
    let ranking = rank_heads(weights, prepared, exec)?;
    let max_k = max_k.unwrap_or(ranking.len()).min(ranking.len());
    let order: Vec<(usize, usize)> = ranking.iter().map(|r| (r.layer, r.head)).collect();
    let mut curve = Vec::with_capacity(max_k + 1);
    for k in 0..=max_k {
        let heads = order[..k].to_vec();
        let recs = joint_head_patch(weights, prepared, &heads, exec)?;
        let (mean, n_excluded) = mean_recovery(&recs);
        curve.push(CumulativePoint {
            k,
            heads,
            mean,
            n_excluded,
            recoveries: recs,
        });
    }
    Ok(HeadPatchReport { ranking, curve })
}

/// Logits with the listed heads' outputs replaced by zero at every position.
pub fn zero_ablate_heads(weights: &WeightBundle, tokens: &[u32], heads: &[(usize, usize)]) -> Result<Vec<f32>> {
    let mut spec = PatchSpec::new();
    let zero = vec![0.0f32; weights.config.d_model];
    for &(l, h) in heads {
        let site = HookSite::head_out(l, h);
        site.validate(&weights.config)?;
        for pos in 0..tokens.len() {
            spec.insert(site, pos, zero.clone())?;
        }
    }
    forward_with_patches(weights, tokens, &spec)
}
