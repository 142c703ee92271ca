// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive layer-combination patching sweeps.

use std::cmp::Ordering;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::model::{HookSite, SiteKind, WeightBundle};

use super::patching::PreparedPair;
use super::recovery::{mean_recovery, RecoveryResult};

/// Every ascending `k`-subset of `0..n`, in lexicographic order.
pub fn layer_combos(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(FixlabError::Intervention(format!(
            "combo size must be in 1..={n}, got {k}"
        )));
    }
    Ok((0..n).combinations(k).collect())
}

/// Patching outcome for one set of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub combo: Vec<usize>,
    pub mean: Option<f64>,
    pub n_items: usize,
    pub n_excluded: usize,
    /// Per item, in input order.
    pub recoveries: Vec<RecoveryResult>,
}

impl ComboResult {
    pub fn from_results(combo: Vec<usize>, recoveries: Vec<RecoveryResult>) -> Self {
        let (mean, n_excluded) = mean_recovery(&recoveries);
        Self {
            combo,
            mean,
            n_items: recoveries.len(),
            n_excluded,
            recoveries,
        }
    }

    /// `[7,10,11]` style label.
    pub fn id(&self) -> String {
        format!("[{}]", self.combo.iter().map(|l| format!("L{l}")).join(","))
    }
}

/// Mean descending, undefined means last, then lexicographic combo.
pub fn rank_order(a: &ComboResult, b: &ComboResult) -> Ordering {
    match (a.mean, b.mean) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.combo.cmp(&b.combo))
}

/// Patch every `combo_size`-subset of layers at sites of `kind` and rank the
/// combinations by mean recovery. `prepared` must hold control activations
/// for every layer of `kind`.
pub fn enumerate_layer_combos(
    weights: &WeightBundle,
    prepared: &[PreparedPair],
    combo_size: usize,
    kind: SiteKind,
    exec: Exec,
) -> Result<Vec<ComboResult>> {
    if kind == SiteKind::HeadOut {
        return Err(FixlabError::Intervention(
            "layer enumeration needs a per-layer site kind".into(),
        ));
    }
    if prepared.is_empty() {
        return Err(FixlabError::Intervention("no items to patch".into()));
    }
    let combos = layer_combos(weights.config.n_layers, combo_size)?;
    let mut out = exec.try_map(&combos, |combo| {
        let sites: Vec<HookSite> = combo
            .iter()
            .map(|&l| HookSite::new(kind, l, None))
            .collect::<Result<_>>()?;
        let recs = prepared
            .iter()
            .map(|p| p.patch(weights, &sites))
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, FixlabError>(ComboResult::from_results(combo.clone(), recs))
    })?;
    out.sort_by(rank_order);
    Ok(out)
}

/// 1-based rank of `combo` and its percentile (share of combos ranked at or
/// below it).
pub fn rank_of(ranked: &[ComboResult], combo: &[usize]) -> Option<(usize, f64)> {
    let i = ranked.iter().position(|r| r.combo == combo)?;
    Some((i + 1, (ranked.len() - i) as f64 / ranked.len() as f64))
}

/// Mean of the defined per-combo means.
pub fn grand_mean(ranked: &[ComboResult]) -> Option<f64> {
    let v: Vec<f64> = ranked.iter().filter_map(|r| r.mean).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::PairInput;
    use crate::model::ModelConfig;

    #[test]
    fn combo_counts() {
        assert_eq!(layer_combos(16, 3).unwrap().len(), 560);
        assert_eq!(layer_combos(4, 4).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(layer_combos(4, 0).is_err());
        assert!(layer_combos(4, 5).is_err());
    }

    #[test]
    fn ranking_is_sorted_and_complete() {
        let w = WeightBundle::random(ModelConfig::toy(40), 3).unwrap();
        let pairs = [
            PairInput::new(vec![1, 2, 3, 9], vec![5, 6, 7, 9], 1, 0),
            PairInput::new(vec![8, 2, 3, 9], vec![5, 16, 17, 9], 1, 1),
        ];
        let prepared: Vec<PreparedPair> = pairs
            .iter()
            .map(|p| PreparedPair::new(&w, p, 30, &[SiteKind::AttnOut]).unwrap())
            .collect();
        let r = enumerate_layer_combos(&w, &prepared, 2, SiteKind::AttnOut, Exec::Sequential).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.windows(2).all(|p| rank_order(&p[0], &p[1]) != Ordering::Greater));
        let par = enumerate_layer_combos(&w, &prepared, 2, SiteKind::AttnOut, Exec::default()).unwrap();
        assert_eq!(r, par);
        assert_eq!(rank_of(&r, &r[0].combo), Some((1, 1.0)));
        assert!(enumerate_layer_combos(&w, &prepared, 2, SiteKind::HeadOut, Exec::Sequential).is_err());
    }

    #[test]
    fn undefined_means_rank_last() {
        let a = ComboResult {
            combo: vec![0],
            mean: None,
            n_items: 1,
            n_excluded: 1,
            recoveries: vec![],
        };
        let b = ComboResult {
            combo: vec![1],
            mean: Some(-5.0),
            n_items: 1,
            n_excluded: 0,
            recoveries: vec![],
        };
        assert_eq!(rank_order(&a, &b), Ordering::Greater);
    }
}
