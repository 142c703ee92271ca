// SPDX-License-Identifier: MIT OR Apache-2.0

//! Turning a prompt and a model into a [`TrialRecord`].

use std::collections::BTreeMap;

use crate::error::{FixlabError, Result};
use crate::model::{forward_logits, ops::probs_of, WeightBundle};
use crate::prompts::{ConditionKind, PromptInstance};
use crate::stats::{accuracy_bit, TrialRecord};

/// Metric key for the probability of the shared verbalizer prefix.
pub const P_FORMAT: &str = "p_format";

/// Metric key prefix for teacher-forced branch probabilities.
pub const P_GIVEN_PREFIX: &str = "p_given_prefix:";

/// Dose recorded for a condition: misleading demos for threshold runs, all
/// of them for GP.
pub fn dose_of(kind: &ConditionKind, shots: usize) -> Option<usize> {
    match kind {
        ConditionKind::ThresholdK(k) => Some(*k),
        ConditionKind::Gp => Some(shots),
        _ => None,
    }
}

fn base_record(model: &str, prompt: &PromptInstance) -> TrialRecord {
    let spec = &prompt.condition;
    TrialRecord {
        model: model.to_string(),
        task: prompt.task.clone(),
        condition: spec.kind.to_string(),
        shots: spec.shots,
        seed: spec.seed,
        item_id: prompt.query_item_id.clone(),
        k: dose_of(&spec.kind, spec.shots),
        p_target: 0.0,
        p_foils: Vec::new(),
        p_demo_set: 0.0,
        accuracy_bit: 0,
        intervention: None,
        lens: None,
        metrics: BTreeMap::new(),
    }
}

/// Measure a single-token prompt from its final-position logits.
pub fn record_from_logits(model: &str, prompt: &PromptInstance, logits: &[f32]) -> TrialRecord {
    let mut r = base_record(model, prompt);
    let mut ids = vec![prompt.answer_token];
    ids.extend(&prompt.foil_tokens);
    let p = probs_of(logits, &ids);
    r.p_target = p[0];
    r.p_foils = p[1..].to_vec();
    r.p_demo_set = probs_of(logits, &prompt.demo_set_tokens()).iter().sum::<f64>().min(1.0);
    r.accuracy_bit = accuracy_bit(r.p_target, &r.p_foils);
    r
}

/// Multi-token verbalizer measurement: `P(prefix)` by teacher forcing the
/// shared prefix, then each verbalizer's next token given it. `p_target` is
/// the correct branch given the prefix.
pub fn record_multitoken(
    weights: &WeightBundle,
    model: &str,
    prompt: &PromptInstance,
    logits: &[f32],
) -> Result<TrialRecord> {
    let plan = prompt
        .multitoken
        .as_ref()
        .ok_or_else(|| FixlabError::Harness("prompt carries no multi-token plan".into()))?;
    let mut r = base_record(model, prompt);
    let mut tokens = prompt.token_ids.clone();
    let mut p_format = 1.0;
    let mut cur = logits.to_vec();
    for &t in &plan.prefix {
        p_format *= probs_of(&cur, &[t])[0];
        tokens.push(t);
        cur = forward_logits(weights, &tokens)?;
    }
    let branch_ids: Vec<u32> = plan.branches.iter().map(|(_, t)| *t).collect();
    let p = probs_of(&cur, &branch_ids);
    let correct = plan
        .branches
        .iter()
        .position(|(l, _)| *l == prompt.answer_label)
        .ok_or_else(|| FixlabError::Harness(format!("no branch for `{}`", prompt.answer_label)))?;
    r.p_target = p[correct];
    r.p_foils = p
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != correct)
        .map(|(_, v)| *v)
        .collect();
    r.accuracy_bit = accuracy_bit(r.p_target, &r.p_foils);
    r.metrics.insert(P_FORMAT.into(), p_format);
    for ((label, _), v) in plan.branches.iter().zip(&p) {
        r.metrics.insert(format!("{P_GIVEN_PREFIX}{label}"), *v);
    }
    Ok(r)
}

/// Run the model on `prompt` and measure it.
pub fn measure_prompt(weights: &WeightBundle, model: &str, prompt: &PromptInstance) -> Result<TrialRecord> {
    let logits = forward_logits(weights, &prompt.token_ids)?;
    if prompt.multitoken.is_some() {
        record_multitoken(weights, model, prompt, &logits)
    } else {
        Ok(record_from_logits(model, prompt, &logits))
    }
}
