// SPDX-License-Identifier: MIT OR Apache-2.0

//! K-fold cross-validation over seed clusters.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bootstrap::draw_rng;
use crate::error::{FixlabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Held-out clusters, ascending.
    pub clusters: Vec<u64>,
    pub n: usize,
    pub mean: f64,
    /// Candidate chosen on the training folds (selection variant only).
    pub selected: Option<String>,
}

/// Deterministic fold partition of the distinct clusters: shuffled under
/// `key`, then dealt round-robin so fold sizes differ by at most one.
pub fn assign_folds(clusters: &BTreeSet<u64>, folds: usize, key: u64) -> Result<Vec<Vec<u64>>> {
    if folds < 2 {
        return Err(FixlabError::Stats("need at least 2 folds".into()));
    }
    if clusters.len() < folds {
        return Err(FixlabError::Stats(format!(
            "{} clusters cannot fill {folds} folds",
            clusters.len()
        )));
    }
    let mut order: Vec<u64> = clusters.iter().copied().collect();
    order.shuffle(&mut draw_rng(key, 0));
    let mut out = vec![Vec::new(); folds];
    for (i, c) in order.into_iter().enumerate() {
        out[i % folds].push(c);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn mean_over(obs: &[(u64, f64)], keep: &BTreeSet<u64>) -> (usize, f64) {
    let vals: Vec<f64> = obs.iter().filter(|(c, _)| keep.contains(c)).map(|(_, v)| *v).collect();
    let n = vals.len();
    (
        n,
        if n == 0 {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / n as f64
        },
    )
}

/// Held-out mean of each fold.
pub fn kfold_cv(obs: &[(u64, f64)], folds: usize, key: u64) -> Result<Vec<FoldResult>> {
    let clusters: BTreeSet<u64> = obs.iter().map(|(c, _)| *c).collect();
    let parts = assign_folds(&clusters, folds, key)?;
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(fold, held)| {
            let set: BTreeSet<u64> = held.iter().copied().collect();
            let (n, mean) = mean_over(obs, &set);
            FoldResult {
                fold,
                clusters: held,
                n,
                mean,
                selected: None,
            }
        })
        .collect())
}

/// Pick the candidate with the best training-fold mean (ties broken by
/// name) and report its held-out mean, per fold. All candidates must share
/// the same cluster set.
pub fn kfold_cv_select(
    candidates: &BTreeMap<String, Vec<(u64, f64)>>,
    folds: usize,
    key: u64,
) -> Result<Vec<FoldResult>> {
    let first = candidates
        .values()
        .next()
        .ok_or_else(|| FixlabError::Stats("no candidates".into()))?;
    let clusters: BTreeSet<u64> = first.iter().map(|(c, _)| *c).collect();
    let parts = assign_folds(&clusters, folds, key)?;
    let mut out = Vec::new();
    for (fold, held) in parts.into_iter().enumerate() {
        let held_set: BTreeSet<u64> = held.iter().copied().collect();
        let train: BTreeSet<u64> = clusters.difference(&held_set).copied().collect();
        let mut best: Option<(&String, f64)> = None;
        for (name, obs) in candidates {
            let (n, m) = mean_over(obs, &train);
            if n == 0 {
                continue;
            }
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((name, m));
            }
        }
        let (name, _) = best.ok_or_else(|| FixlabError::Stats("no training data".into()))?;
        let (n, mean) = mean_over(&candidates[name], &held_set);
        out.push(FoldResult {
            fold,
            clusters: held,
            n,
            mean,
            selected: Some(name.clone()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clusters_equal_folds() {
        let obs: Vec<(u64, f64)> = (0..4).flat_map(|c| [(c, 0.5), (c, 1.5)]).collect();
        let r = kfold_cv(&obs, 4, 9).unwrap();
        assert!(r.iter().all(|f| f.mean == 1.0 && f.clusters.len() == 1));
    }

    #[test]
    fn partition_is_complete_and_balanced() {
        let set: BTreeSet<u64> = [42, 0, 1, 2, 3, 7, 13, 21, 55, 99].into_iter().collect();
        let parts = assign_folds(&set, 4, 3).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert!(sizes.iter().all(|&s| s == 2 || s == 3));
        let union: BTreeSet<u64> = parts.iter().flatten().copied().collect();
        assert_eq!(union, set);
        assert_eq!(parts, assign_folds(&set, 4, 3).unwrap());
    }

    #[test]
    fn too_few_clusters() {
        assert!(kfold_cv(&[(1, 0.0), (2, 1.0)], 4, 0).is_err());
    }

    #[test]
    fn selection_uses_training_folds() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), (0..8).map(|s| (s, 1.0)).collect::<Vec<_>>());
        c.insert("b".to_string(), (0..8).map(|s| (s, 2.0)).collect::<Vec<_>>());
        let r = kfold_cv_select(&c, 4, 0).unwrap();
        assert!(r.iter().all(|f| f.selected.as_deref() == Some("b") && f.mean == 2.0));
    }
}
