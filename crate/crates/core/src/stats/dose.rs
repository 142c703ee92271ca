// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bootstrap::{cluster_bootstrap_ci, BootstrapOptions, CiResult};
use super::hypothesis::{spearman, Alternative, SpearmanResult};
use super::record::TrialRecord;
use crate::error::{FixlabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosePoint {
    pub k: usize,
    pub n: usize,
    pub accuracy: CiResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponse {
    pub points: Vec<DosePoint>,
    /// Observation-level correlation of `k` with the accuracy bit.
    pub spearman: SpearmanResult,
}

/// Per-`k` accuracy with cluster CIs plus a one-sided (negative) Spearman
/// test over all observations.
pub fn dose_response(records: &[TrialRecord], opts: BootstrapOptions) -> Result<DoseResponse> {
    let mut by_k: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        let k =
            r.k.ok_or_else(|| FixlabError::Stats(format!("record {} has no dose k", r.key())))?;
        by_k.entry(k).or_default().push((r.seed, f64::from(r.accuracy_bit)));
    }
    if by_k.len() < 2 {
        return Err(FixlabError::Stats("dose-response needs at least 2 distinct k".into()));
    }
    let points = by_k
        .iter()
        .map(|(&k, obs)| {
            Ok(DosePoint {
                k,
                n: obs.len(),
                accuracy: cluster_bootstrap_ci(obs, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (x, y): (Vec<f64>, Vec<f64>) = by_k
        .iter()
        .flat_map(|(&k, obs)| obs.iter().map(move |(_, a)| (k as f64, *a)))
        .unzip();
    let spearman = spearman(&x, &y, Alternative::Negative, opts.key)?;
    Ok(DoseResponse { points, spearman })
}
