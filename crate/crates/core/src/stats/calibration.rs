// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contextual calibration: divide label probabilities by their probability
//! under a content-free query with the same demonstrations.

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::model::{forward_logits, ops::probs_of, WeightBundle};
use crate::prompts::{build_prompt, with_query_text, ConditionSpec, Item, Task, Tokenizer};

/// Default content-free probe.
pub const CONTENT_FREE: &str = "N/A";

/// Per-label calibrated scores; labels with `p_hat == 0` keep their raw
/// probability and are listed in the second return value.
pub fn calibrated_scores(p: &[f64], p_hat: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut skipped = Vec::new();
    let scores = p
        .iter()
        .zip(p_hat)
        .enumerate()
        .map(|(i, (&p, &h))| {
            if h > 0.0 {
                p / h
            } else {
                skipped.push(i);
                p
            }
        })
        .collect();
    (scores, skipped)
}

/// `true` iff `scores[correct]` strictly beats every other score.
pub fn strict_argmax_is(scores: &[f64], correct: usize) -> bool {
    scores
        .iter()
        .enumerate()
        .all(|(i, &s)| i == correct || scores[correct] > s)
}

/// One calibrated observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedItem {
    pub p: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub correct: usize,
    pub raw_correct: bool,
    pub calibrated_correct: bool,
    pub skipped_labels: Vec<usize>,
}

pub fn calibrate_item(p: &[f64], p_hat: &[f64], correct: usize) -> Result<CalibratedItem> {
    if p.len() != p_hat.len() || correct >= p.len() {
        return Err(FixlabError::Stats("calibration shapes disagree".into()));
    }
    let (scores, skipped) = calibrated_scores(p, p_hat);
    Ok(CalibratedItem {
        p: p.to_vec(),
        p_hat: p_hat.to_vec(),
        correct,
        raw_correct: strict_argmax_is(p, correct),
        calibrated_correct: strict_argmax_is(&scores, correct),
        skipped_labels: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub raw_accuracy: f64,
    pub calibrated_accuracy: f64,
    /// Items where at least one label had `p_hat == 0`.
    pub n_skipped: usize,
    pub items: Vec<CalibratedItem>,
}

pub fn summarize(items: Vec<CalibratedItem>) -> Result<CalibrationReport> {
    if items.is_empty() {
        return Err(FixlabError::Stats("no calibration items".into()));
    }
    let n = items.len();
    let frac = |f: fn(&CalibratedItem) -> bool| items.iter().filter(|i| f(i)).count() as f64 / n as f64;
    Ok(CalibrationReport {
        n,
        raw_accuracy: frac(|i| i.raw_correct),
        calibrated_accuracy: frac(|i| i.calibrated_correct),
        n_skipped: items.iter().filter(|i| !i.skipped_labels.is_empty()).count(),
        items,
    })
}

/// Model-driven calibration over `(seed, query)` pairs of one condition.
#[allow(clippy::too_many_arguments)]
pub fn contextual_calibration(
    weights: &WeightBundle,
    tokenizer: &Tokenizer,
    task: &Task,
    spec: &ConditionSpec,
    seeds: &[u64],
    queries: &[Item],
    content_free: &str,
    exec: Exec,
) -> Result<CalibrationReport> {
    let units: Vec<(u64, &Item)> = seeds
        .iter()
        .flat_map(|&s| queries.iter().map(move |q| (s, q)))
        .collect();
    let items = exec.try_map(&units, |&(seed, query)| {
        let spec = ConditionSpec { seed, ..spec.clone() };
        let prompt = build_prompt(task, &spec, query, tokenizer)?;
        let mut labels = vec![prompt.answer_token];
        labels.extend(&prompt.foil_tokens);
        let p = probs_of(&forward_logits(weights, &prompt.token_ids)?, &labels);
        let free = with_query_text(task, &prompt, content_free, tokenizer)?;
        let p_hat = probs_of(&forward_logits(weights, &free)?, &labels);
        calibrate_item(&p, &p_hat, 0)
    })?;
    summarize(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_p_hat_keeps_argmax() {
        for p in [[0.2, 0.7], [0.6, 0.1], [0.3, 0.3]] {
            let it = calibrate_item(&p, &[0.4, 0.4], 0).unwrap();
            assert_eq!(it.raw_correct, it.calibrated_correct);
        }
    }

    #[test]
    fn pure_label_bias_is_removed() {
        // logits = truth + constant offset favouring label 1
        let offset = [0.0f64, 3.0];
        let truth = [[2.0f64, 0.0], [1.5, 0.0], [0.5, 0.0]];
        let softmax = |l: [f64; 2]| {
            let z = l[0].exp() + l[1].exp();
            vec![l[0].exp() / z, l[1].exp() / z]
        };
        let p_hat = softmax(offset);
        let items: Vec<_> = truth
            .iter()
            .map(|t| calibrate_item(&softmax([t[0] + offset[0], t[1] + offset[1]]), &p_hat, 0).unwrap())
            .collect();
        let r = summarize(items).unwrap();
        assert_eq!(r.raw_accuracy, 0.0);
        assert_eq!(r.calibrated_accuracy, 1.0);
    }

    #[test]
    fn zero_p_hat_is_reported() {
        let it = calibrate_item(&[0.1, 0.9], &[0.0, 0.5], 0).unwrap();
        assert_eq!(it.skipped_labels, vec![0]);
        let r = summarize(vec![it]).unwrap();
        assert_eq!(r.n_skipped, 1);
    }
}
