// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired and leave-one-out mean activation patching.

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::model::{
    forward_patched_with_capture, forward_with_cache, forward_with_patches, ops::probs_of, ActivationCache, Capture,
    HookSite, PatchSpec, PrefixState, SiteKind, WeightBundle,
};

use super::recovery::RecoveryResult;

/// A GP prompt and its matched control.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairInput {
    pub gp_tokens: Vec<u32>,
    pub ctrl_tokens: Vec<u32>,
    /// Trailing tokens that must agree (the shared query line).
    pub suffix_len: usize,
    /// Resampling cluster (the seed).
    pub cluster: u64,
}

impl PairInput {
    pub fn new(gp_tokens: Vec<u32>, ctrl_tokens: Vec<u32>, suffix_len: usize, cluster: u64) -> Self {
        Self {
            gp_tokens,
            ctrl_tokens,
            suffix_len,
            cluster,
        }
    }

    /// Fail unless both prompts end with the same query tokens.
    pub fn check_suffix(&self) -> Result<()> {
        let n = self.suffix_len.max(1);
        let ok = self.gp_tokens.len() >= n
            && self.ctrl_tokens.len() >= n
            && self.gp_tokens[self.gp_tokens.len() - n..] == self.ctrl_tokens[self.ctrl_tokens.len() - n..];
        if ok {
            Ok(())
        } else {
            Err(FixlabError::Intervention(format!(
                "GP and control prompts do not share their final {n} query tokens"
            )))
        }
    }
}

/// Probability of `id` under the full softmax.
pub fn prob(logits: &[f32], id: u32) -> f64 {
    probs_of(logits, &[id])[0]
}

pub(crate) fn check_pair_tokens(weights: &WeightBundle, target: u32, foil: u32) -> Result<()> {
    let v = weights.config.vocab_size as u32;
    if target == foil || target >= v || foil >= v {
        return Err(FixlabError::Intervention(format!(
            "target {target} and foil {foil} must be distinct ids below {v}"
        )));
    }
    Ok(())
}

fn check_sites(weights: &WeightBundle, sites: &[HookSite]) -> Result<()> {
    if sites.is_empty() {
        return Err(FixlabError::Intervention("no patch sites".into()));
    }
    for s in sites {
        s.validate(&weights.config)?;
    }
    Ok(())
}

/// A pair with its GP run retained and control activations captured at the
/// final position, ready for repeated last-position patches.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub cluster: u64,
    pub gp: PrefixState,
    pub ctrl: ActivationCache,
    pub p_gp: f64,
    pub p_ctrl: f64,
    pub target: u32,
}

impl PreparedPair {
    /// Capture every site of `kinds` at the control's final position.
    pub fn new(weights: &WeightBundle, pair: &PairInput, target: u32, kinds: &[SiteKind]) -> Result<Self> {
        let sites: Vec<HookSite> = kinds
            .iter()
            .flat_map(|&k| HookSite::all_of_kind(&weights.config, k))
            .collect();
        Self::with_sites(weights, pair, target, &sites)
    }

    /// Capture exactly `sites` at the control's final position.
    pub fn with_sites(weights: &WeightBundle, pair: &PairInput, target: u32, sites: &[HookSite]) -> Result<Self> {
        pair.check_suffix()?;
        let gp = PrefixState::new(weights, &pair.gp_tokens)?;
        let (ctrl_logits, ctrl) = forward_patched_with_capture(
            weights,
            &pair.ctrl_tokens,
            &PatchSpec::new(),
            &Capture::last_position(sites.iter().copied()),
        )?;
        Ok(Self {
            cluster: pair.cluster,
            p_gp: prob(gp.logits(), target),
            p_ctrl: prob(&ctrl_logits, target),
            gp,
            ctrl,
            target,
        })
    }

    fn last(&self) -> usize {
        self.gp.tokens().len() - 1
    }

    /// Control activations at the final position for `sites`.
    pub fn ctrl_patch(&self, sites: &[HookSite]) -> Result<PatchSpec> {
        let mut spec = PatchSpec::new();
        for &s in sites {
            spec.insert(s, self.last(), self.ctrl.last(s)?.to_vec())?;
        }
        Ok(spec)
    }

    /// Recovery after patching `spec` into the GP run.
    pub fn recovery_with(&self, weights: &WeightBundle, spec: &PatchSpec) -> Result<RecoveryResult> {
        let logits = self.gp.patched_logits(weights, spec)?;
        Ok(RecoveryResult::new(self.p_gp, self.p_ctrl, prob(&logits, self.target)))
    }

    /// Recovery after patching control activations at `sites`.
    pub fn patch(&self, weights: &WeightBundle, sites: &[HookSite]) -> Result<RecoveryResult> {
        self.recovery_with(weights, &self.ctrl_patch(sites)?)
    }
}

/// Which positions a paired patch touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Positions {
    /// The final position only.
    #[default]
    Last,
    /// Every position, aligned from the end of both prompts.
    AllAligned,
}

/// Paired patching of one item.
pub fn paired_patch_item(
    weights: &WeightBundle,
    pair: &PairInput,
    sites: &[HookSite],
    target: u32,
    foil: u32,
    positions: Positions,
) -> Result<RecoveryResult> {
    check_pair_tokens(weights, target, foil)?;
    check_sites(weights, sites)?;
    pair.check_suffix()?;
    match positions {
        Positions::Last => PreparedPair::with_sites(weights, pair, target, sites)?.patch(weights, sites),
        Positions::AllAligned => {
            let (gl, cl) = (pair.gp_tokens.len(), pair.ctrl_tokens.len());
            let (ctrl_logits, ctrl) = forward_with_cache(weights, &pair.ctrl_tokens, sites)?;
            let gp_logits = crate::model::forward_logits(weights, &pair.gp_tokens)?;
            let mut spec = PatchSpec::new();
            for back in 0..gl.min(cl) {
                for &s in sites {
                    spec.insert(s, gl - 1 - back, ctrl.require(s, cl - 1 - back)?.to_vec())?;
                }
            }
            let patched = forward_with_patches(weights, &pair.gp_tokens, &spec)?;
            Ok(RecoveryResult::new(
                prob(&gp_logits, target),
                prob(&ctrl_logits, target),
                prob(&patched, target),
            ))
        }
    }
}

/// Patch each item with the mean control activation of all other items,
/// at the final position.
pub fn loo_mean_patch(
    weights: &WeightBundle,
    items: &[PairInput],
    sites: &[HookSite],
    target: u32,
    foil: u32,
    exec: Exec,
) -> Result<Vec<RecoveryResult>> {
    check_pair_tokens(weights, target, foil)?;
    check_sites(weights, sites)?;
    if items.len() < 2 {
        return Err(FixlabError::Intervention(format!(
            "leave-one-out needs at least 2 items, got {}",
            items.len()
        )));
    }
    let prepared = exec.try_map(items, |p| PreparedPair::with_sites(weights, p, target, sites))?;
    loo_mean_prepared(weights, &prepared, sites, exec)
}

/// [`loo_mean_patch`] over already prepared pairs.
pub fn loo_mean_prepared(
    weights: &WeightBundle,
    prepared: &[PreparedPair],
    sites: &[HookSite],
    exec: Exec,
) -> Result<Vec<RecoveryResult>> {
    let d = weights.config.d_model;
    let n = prepared.len();
    if n < 2 {
        return Err(FixlabError::Intervention("leave-one-out needs at least 2 items".into()));
    }
    // per-site sums in f64, then subtract each item's own vector
    let mut sums = Vec::with_capacity(sites.len());
    for &s in sites {
        let mut acc = vec![0f64; d];
        for p in prepared {
            for (a, v) in acc.iter_mut().zip(p.ctrl.last(s)?) {
                *a += f64::from(*v);
            }
        }
        sums.push(acc);
    }
    let idx: Vec<usize> = (0..n).collect();
    exec.try_map(&idx, |&i| {
        let p = &prepared[i];
        let mut spec = PatchSpec::new();
        for (&s, sum) in sites.iter().zip(&sums) {
            let own = p.ctrl.last(s)?;
            let mean: Vec<f32> = sum
                .iter()
                .zip(own)
                .map(|(t, o)| ((t - f64::from(*o)) / (n - 1) as f64) as f32)
                .collect();
            spec.insert(s, p.gp.tokens().len() - 1, mean)?;
        }
        p.recovery_with(weights, &spec)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> WeightBundle {
        WeightBundle::random(ModelConfig::toy(50), 21).unwrap()
    }

    #[test]
    fn identical_prompts_are_excluded() {
        let w = toy();
        let pair = PairInput::new(vec![3, 4, 5, 6], vec![3, 4, 5, 6], 1, 0);
        let r = paired_patch_item(&w, &pair, &[HookSite::attn_out(1)], 7, 8, Positions::Last).unwrap();
        assert!(r.is_excluded());
    }

    #[test]
    fn suffix_mismatch_is_rejected() {
        let w = toy();
        let pair = PairInput::new(vec![3, 4, 5, 6], vec![3, 4, 9, 7], 2, 0);
        assert!(paired_patch_item(&w, &pair, &[HookSite::attn_out(1)], 7, 8, Positions::Last).is_err());
    }

    #[test]
    fn empty_sites_rejected() {
        let w = toy();
        let pair = PairInput::new(vec![3, 6], vec![4, 6], 1, 0);
        assert!(paired_patch_item(&w, &pair, &[], 7, 8, Positions::Last).is_err());
        assert!(paired_patch_item(&w, &pair, &[HookSite::attn_out(0)], 7, 7, Positions::Last).is_err());
    }

    #[test]
    fn loo_with_two_identical_items_equals_paired() {
        let w = toy();
        let pair = PairInput::new(vec![1, 2, 3, 9], vec![11, 12, 13, 9], 1, 0);
        let sites = [HookSite::attn_out(0), HookSite::attn_out(2)];
        let loo = loo_mean_patch(&w, &[pair.clone(), pair.clone()], &sites, 30, 31, Exec::Sequential).unwrap();
        let paired = paired_patch_item(&w, &pair, &sites, 30, 31, Positions::Last).unwrap();
        assert_eq!(loo[0], paired);
        assert_eq!(loo[1], paired);
        assert!(loo_mean_patch(&w, &[pair], &sites, 30, 31, Exec::Sequential).is_err());
    }
}
