// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-combo and per-head recovery tables with cluster-bootstrap intervals.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::stats::{cluster_bootstrap_ci, BootstrapOptions};

use super::enumerate::ComboResult;
use super::heads::HeadResult;
use super::recovery::RecoveryResult;

/// One row; the interval is empty when fewer than two clusters remain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub id: String,
    pub n_items: usize,
    pub n_excluded: usize,
    pub mean_recovery: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Summarize `results`, whose `i`-th entry belongs to cluster `clusters[i]`.
pub fn recovery_row(
    id: impl Into<String>,
    results: &[RecoveryResult],
    clusters: &[u64],
    opts: BootstrapOptions,
) -> Result<RecoveryRow> {
    if results.len() != clusters.len() {
        return Err(FixlabError::Stats("one cluster key per result required".into()));
    }
    let obs: Vec<(u64, f64)> = results
        .iter()
        .zip(clusters)
        .filter_map(|(r, &c)| r.recovery.map(|v| (c, v)))
        .collect();
    let n_excluded = results.len() - obs.len();
    let distinct = obs.iter().map(|o| o.0).collect::<std::collections::BTreeSet<_>>().len();
    let (mean, lo, hi) = if obs.is_empty() {
        (None, None, None)
    } else if distinct < 2 {
        (
            Some(obs.iter().map(|o| o.1).sum::<f64>() / obs.len() as f64),
            None,
            None,
        )
    } else {
        let ci = cluster_bootstrap_ci(&obs, opts)?;
        (Some(ci.point), Some(ci.lo), Some(ci.hi))
    };
    Ok(RecoveryRow {
        id: id.into(),
        n_items: results.len(),
        n_excluded,
        mean_recovery: mean,
        ci_lo: lo,
        ci_hi: hi,
    })
}

pub fn combo_rows(ranked: &[ComboResult], clusters: &[u64], opts: BootstrapOptions) -> Result<Vec<RecoveryRow>> {
    ranked
        .iter()
        .map(|c| recovery_row(c.id(), &c.recoveries, clusters, opts))
        .collect()
}

pub fn head_rows(ranked: &[HeadResult], clusters: &[u64], opts: BootstrapOptions) -> Result<Vec<RecoveryRow>> {
    ranked
        .iter()
        .map(|h| recovery_row(h.id(), &h.recoveries, clusters, opts))
        .collect()
}

/// CSV with header `id,n_items,n_excluded,mean_recovery,ci_lo,ci_hi`.
pub fn write_recovery_csv<W: Write>(out: W, rows: &[RecoveryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| FixlabError::from(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rs = [
            RecoveryResult::new(0.0, 0.5, 0.25),
            RecoveryResult::new(0.0, 0.5, 0.5),
            RecoveryResult::new(0.2, 0.2, 0.3),
        ];
        let row = recovery_row("[L7,L10,L11]", &rs, &[1, 2, 2], BootstrapOptions::new(0)).unwrap();
        assert_eq!(row.n_excluded, 1);
        assert_eq!(row.mean_recovery, Some(0.75));
        let mut buf = Vec::new();
        write_recovery_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,n_items,n_excluded,mean_recovery,ci_lo,ci_hi"));
        assert!(lines.next().unwrap().starts_with("\"[L7,L10,L11]\",3,1,0.75,0.5,"));
    }
}
