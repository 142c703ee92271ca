// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

/// Minimum `|p_ctrl - p_gp|` for which recovery is defined.
pub const EXCLUSION_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    DenominatorBelowThreshold,
}

/// Outcome of one patched run measured against its two unpatched baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub p_gp: f64,
    pub p_ctrl: f64,
    pub p_patched: f64,
    /// `(p_patched - p_gp) / (p_ctrl - p_gp)`, absent when excluded.
    pub recovery: Option<f64>,
    pub exclusion_reason: Option<ExclusionReason>,
}

impl RecoveryResult {
    pub fn new(p_gp: f64, p_ctrl: f64, p_patched: f64) -> Self {
        let denom = p_ctrl - p_gp;
        if denom.abs() < EXCLUSION_THRESHOLD {
            Self {
                p_gp,
                p_ctrl,
                p_patched,
                recovery: None,
                exclusion_reason: Some(ExclusionReason::DenominatorBelowThreshold),
            }
        } else {
            Self {
                p_gp,
                p_ctrl,
                p_patched,
                recovery: Some((p_patched - p_gp) / denom),
                exclusion_reason: None,
            }
        }
    }

    pub fn is_excluded(&self) -> bool {
        self.recovery.is_none()
    }
}

/// Mean over included results and the number excluded.
pub fn mean_recovery(results: &[RecoveryResult]) -> (Option<f64>, usize) {
    let vals: Vec<f64> = results.iter().filter_map(|r| r.recovery).collect();
    let excluded = results.len() - vals.len();
    if vals.is_empty() {
        (None, excluded)
    } else {
        (Some(vals.iter().sum::<f64>() / vals.len() as f64), excluded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebra_is_exact() {
        let r = RecoveryResult::new(0.048, 0.431, 0.048);
        assert_eq!(r.recovery, Some(0.0));
        let r = RecoveryResult::new(0.048, 0.431, 0.431);
        assert_eq!(r.recovery, Some(1.0));
    }

    #[test]
    fn small_denominator_is_excluded() {
        let r = RecoveryResult::new(0.2, 0.205, 0.9);
        assert!(r.is_excluded());
        assert_eq!(r.exclusion_reason, Some(ExclusionReason::DenominatorBelowThreshold));
        let (mean, n_ex) = mean_recovery(&[r, RecoveryResult::new(0.0, 0.5, 0.25)]);
        assert_eq!(mean, Some(0.5));
        assert_eq!(n_ex, 1);
    }

    #[test]
    fn serializes_null_recovery() {
        let r = RecoveryResult::new(0.3, 0.3, 0.3);
        let v = serde_json::to_value(r).unwrap();
        assert!(v["recovery"].is_null());
        assert_eq!(v["exclusion_reason"], "denominator_below_threshold");
    }
}
