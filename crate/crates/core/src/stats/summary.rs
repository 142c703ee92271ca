// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

/// One line of an experiment's stats summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub statistic: String,
    /// Absent when every observation was excluded.
    pub point: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub n: usize,
    pub n_excluded: usize,
    pub test: Option<String>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
}

impl StatsSummary {
    pub fn point(statistic: impl Into<String>, point: f64, n: usize) -> Self {
        Self {
            statistic: statistic.into(),
            point: Some(point),
            ci: None,
            n,
            n_excluded: 0,
            test: None,
            p_raw: None,
            p_adjusted: None,
        }
    }
}
