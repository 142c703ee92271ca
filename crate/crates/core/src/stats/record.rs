// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::interventions::RecoveryResult;

/// A recovery measurement tagged with what was patched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    /// e.g. `attn_out:L7+L10+L11` or `head_out:L10H5`.
    pub label: String,
    #[serde(flatten)]
    pub result: RecoveryResult,
}

/// One lens layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensPoint {
    pub layer: usize,
    pub p_target: f64,
    pub p_foil: f64,
    pub correct: u8,
}

/// One (model, task, condition, seed, item) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model: String,
    pub task: String,
    pub condition: String,
    pub shots: usize,
    pub seed: u64,
    pub item_id: String,
    /// Misleading-label count for threshold conditions.
    pub k: Option<usize>,
    pub p_target: f64,
    pub p_foils: Vec<f64>,
    /// Total probability on the distinct demonstrated labels.
    pub p_demo_set: f64,
    pub accuracy_bit: u8,
    pub intervention: Option<InterventionRecord>,
    pub lens: Option<Vec<LensPoint>>,
    /// Extra named measurements (multi-token, calibration, ...).
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// `1` iff the target beats every foil strictly (ties are incorrect).
pub fn accuracy_bit(p_target: f64, p_foils: &[f64]) -> u8 {
    u8::from(p_foils.iter().all(|&f| p_target > f))
}

impl TrialRecord {
    /// Resume/identity key.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.model,
            self.task,
            self.condition,
            self.shots,
            self.seed,
            self.item_id,
            self.intervention.as_ref().map_or("", |i| i.label.as_str())
        )
    }

    /// Check the probability ranges and the stored accuracy bit.
    pub fn validate(&self) -> Result<()> {
        let probs = std::iter::once(self.p_target)
            .chain(self.p_foils.iter().copied())
            .chain(std::iter::once(self.p_demo_set));
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(FixlabError::Stats(format!(
                    "record {} has probability {p} outside [0, 1]",
                    self.key()
                )));
            }
        }
        if accuracy_bit(self.p_target, &self.p_foils) != self.accuracy_bit {
            return Err(FixlabError::Stats(format!(
                "record {} stores accuracy_bit {} inconsistent with its probabilities",
                self.key(),
                self.accuracy_bit
            )));
        }
        Ok(())
    }
}

/// Keys of records whose accuracy bit disagrees with their probabilities.
pub fn audit_accuracy(records: &[TrialRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| accuracy_bit(r.p_target, &r.p_foils) != r.accuracy_bit)
        .map(TrialRecord::key)
        .collect()
}

#[cfg(test)]
pub(crate) fn sample(seed: u64, value: f64) -> TrialRecord {
    TrialRecord {
        model: "toy".into(),
        task: "category".into(),
        condition: "gp".into(),
        shots: 8,
        seed,
        item_id: format!("category:dog:{seed:02}"),
        k: None,
        p_target: value,
        p_foils: vec![1.0 - value],
        p_demo_set: 1.0 - value,
        accuracy_bit: accuracy_bit(value, &[1.0 - value]),
        intervention: None,
        lens: None,
        metrics: BTreeMap::new(),
    }
}
