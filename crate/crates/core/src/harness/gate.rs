// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-token gate run before every experiment.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::prompts::{ConditionKind, Task, Tokenizer, NONSENSE};

/// Labels that must encode to one token for `conditions` on `task`.
pub fn gated_labels(task: &Task, conditions: &[ConditionKind]) -> Vec<String> {
    let multitoken = task.labels.iter().all(|l| l.contains(' '));
    let mut out = BTreeSet::new();
    for c in conditions {
        if multitoken {
            if matches!(c, ConditionKind::GpSingleTokenControl | ConditionKind::CtrlSingleToken) {
                for l in &task.labels {
                    out.insert(l.rsplit(' ').next().unwrap_or(l).to_string());
                }
            }
        } else {
            out.extend(task.labels.iter().cloned());
        }
        if matches!(c, ConditionKind::HomogNonsense | ConditionKind::VariedNonsense) {
            out.extend(NONSENSE.iter().map(|s| s.to_string()));
        }
    }
    out.into_iter().collect()
}

/// Verify every gated label; returns `(label, id)` pairs or the first failure.
pub fn single_token_gate(
    tokenizer: &Tokenizer,
    task: &Task,
    conditions: &[ConditionKind],
) -> Result<Vec<(String, u32)>> {
    gated_labels(task, conditions)
        .into_iter()
        .map(|l| {
            let id = tokenizer.single_token(&l)?;
            Ok((l, id))
        })
        .collect()
}
