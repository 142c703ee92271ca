// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rendering a condition into a tokenized prompt.
//!
//! Binary tasks list the queried class first (`dog`, `positive`, ...), so the
//! GP label is the second class. Every draw is driven by a ChaCha8 stream
//! keyed on `(task, condition, shots, seed, query item)`, which makes a
//! render a pure function of its inputs.

use std::hash::Hasher;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::condition::{ConditionKind, ConditionSpec, NONSENSE};
use super::tasks::{render_format_variant, Item, Task, Template};
use super::tokenizer::Tokenizer;
use crate::error::{FixlabError, Result};

/// Teacher-forcing plan for multi-token verbalizers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultitokenPlan {
    /// Each verbalizer with its full token sequence.
    pub verbalizers: Vec<(String, Vec<u32>)>,
    /// Leading tokens shared by all verbalizers (the format tokens).
    pub prefix: Vec<u32>,
    /// First token after the prefix, per verbalizer.
    pub branches: Vec<(String, u32)>,
    /// Whether every verbalizer encodes to exactly two tokens.
    pub two_tokens: bool,
}

/// A rendered, tokenized prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptInstance {
    pub task: String,
    pub condition: ConditionSpec,
    pub query_item_id: String,
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Number of trailing tokens that encode the query line.
    pub query_suffix_len: usize,
    pub answer_label: String,
    pub answer_token: u32,
    pub foil_labels: Vec<String>,
    pub foil_tokens: Vec<u32>,
    pub demo_item_ids: Vec<String>,
    pub demo_labels: Vec<String>,
    /// Token sequence of every demo label, sorted.
    pub demo_label_multiset: Vec<Vec<u32>>,
    pub multitoken: Option<MultitokenPlan>,
}

impl PromptInstance {
    /// Distinct single-token labels present in the demonstrations.
    pub fn demo_set_tokens(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .demo_label_multiset
            .iter()
            .filter(|t| t.len() == 1)
            .map(|t| t[0])
            .collect();
        ids.dedup();
        ids
    }

    /// Token ids of the query line.
    pub fn query_suffix(&self) -> &[u32] {
        &self.token_ids[self.token_ids.len() - self.query_suffix_len..]
    }
}

fn is_multitoken_task(task: &Task) -> bool {
    task.labels.iter().all(|l| l.contains(' '))
}

fn single_label(label: &str) -> &str {
    label.rsplit(' ').next().unwrap_or(label)
}

/// Which class the query must come from under `kind`.
pub fn query_class(task: &Task, kind: &ConditionKind) -> Result<usize> {
    let n = task.labels.len();
    let unsupported = || {
        Err(FixlabError::Prompt(format!(
            "condition `{kind}` does not apply to task `{}`",
            task.name
        )))
    };
    if is_multitoken_task(task) {
        return match kind {
            ConditionKind::GpMultitoken(p) => {
                let c = class_of_polarity(task, p)?;
                Ok(1 - c)
            }
            ConditionKind::CtrlBalanced
            | ConditionKind::ZeroShot
            | ConditionKind::GpSingleTokenControl
            | ConditionKind::CtrlSingleToken => Ok(1),
            _ => unsupported(),
        };
    }
    match kind {
        ConditionKind::GpMultitoken(_) | ConditionKind::GpSingleTokenControl | ConditionKind::CtrlSingleToken => {
            unsupported()
        }
        ConditionKind::ReverseGp if n == 2 => Ok(1),
        ConditionKind::GpMulticlass(dom) => {
            let d = task.class_of(dom)?;
            Ok(if d == 0 { 1 } else { 0 })
        }
        ConditionKind::ExcludeLabel(l) => task.class_of(l),
        ConditionKind::DogHeavy if n > 2 => Ok(0),
        ConditionKind::ReverseGp | ConditionKind::DogHeavy => unsupported(),
        ConditionKind::ThresholdK(_) | ConditionKind::Alternating | ConditionKind::Recency(_) if n != 2 => {
            unsupported()
        }
        _ => Ok(0),
    }
}

fn class_of_polarity(task: &Task, polarity: &str) -> Result<usize> {
    task.labels
        .iter()
        .position(|l| l == polarity || single_label(l) == polarity)
        .ok_or_else(|| FixlabError::Prompt(format!("unknown polarity `{polarity}`")))
}

fn seed_for(task: &Task, spec: &ConditionSpec, query: &Item) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for part in [
        task.name.as_str(),
        &spec.kind.to_string(),
        &spec.shots.to_string(),
        &spec.seed.to_string(),
        &query.id,
    ] {
        h.write(part.as_bytes());
        h.write_u8(0xff);
    }
    h.finish()
}

/// Split `shots` over `classes` as evenly as possible, remainder to the first.
fn even_split(shots: usize, classes: &[usize]) -> Vec<usize> {
    let base = shots / classes.len();
    let rem = shots % classes.len();
    classes
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(c, base + usize::from(i < rem)))
        .collect()
}

/// Item classes and labels per demo position, before item assignment.
struct Layout {
    classes: Vec<usize>,
    labels: Vec<String>,
    shuffle: bool,
}

fn layout(task: &Task, spec: &ConditionSpec, q: usize, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let n = task.labels.len();
    let shots = spec.shots;
    let label = |c: usize| task.labels[c].clone();
    let all: Vec<usize> = (0..n).collect();
    let uniform = |c: usize| (vec![c; shots], vec![label(c); shots]);
    let gp_class = if n == 2 { 1 - q } else { 1 };
    let correct = |classes: Vec<usize>, shuffle: bool| Layout {
        labels: classes.iter().map(|&c| label(c)).collect(),
        classes,
        shuffle,
    };

    Ok(match &spec.kind {
        ConditionKind::ZeroShot => correct(Vec::new(), false),
        ConditionKind::Gp | ConditionKind::ReverseGp | ConditionKind::FormatVariant(_) => {
            let (classes, labels) = uniform(gp_class);
            Layout {
                classes,
                labels,
                shuffle: false,
            }
        }
        ConditionKind::GpMulticlass(dom) => {
            let (classes, labels) = uniform(task.class_of(dom)?);
            Layout {
                classes,
                labels,
                shuffle: false,
            }
        }
        ConditionKind::CtrlBalanced => {
            if !shots.is_multiple_of(n) {
                return Err(FixlabError::Prompt(format!(
                    "balanced control needs shots divisible by {n}, got {shots}"
                )));
            }
            correct(even_split(shots, &all), true)
        }
        ConditionKind::Random => {
            let classes = even_split(shots, &all);
            let labels = classes.iter().map(|_| label(rng.gen_range(0..n))).collect();
            Layout {
                classes,
                labels,
                shuffle: true,
            }
        }
        ConditionKind::HomogNonsense => Layout {
            classes: even_split(shots, &all),
            labels: vec![NONSENSE[0].to_string(); shots],
            shuffle: true,
        },
        ConditionKind::VariedNonsense => {
            let mut order: Vec<&str> = NONSENSE.to_vec();
            order.shuffle(rng);
            let mut labels: Vec<String> = NONSENSE.iter().map(|s| s.to_string()).collect();
            labels.extend((0..shots - NONSENSE.len()).map(|i| order[i % order.len()].to_string()));
            labels.shuffle(rng);
            Layout {
                classes: even_split(shots, &all),
                labels,
                shuffle: false,
            }
        }
        ConditionKind::ThresholdK(k) => {
            let mut classes = vec![gp_class; *k];
            classes.extend(std::iter::repeat_n(q, shots - k));
            correct(classes, true)
        }
        ConditionKind::Alternating => correct(
            (0..shots).map(|i| if i % 2 == 0 { gp_class } else { q }).collect(),
            false,
        ),
        ConditionKind::Recency(p) => {
            let mut classes = vec![gp_class; shots];
            classes[p - 1] = q;
            correct(classes, false)
        }
        ConditionKind::DogHeavy => {
            if shots < n {
                return Err(FixlabError::Prompt(format!("dog_heavy needs at least {n} shots")));
            }
            let mut classes = vec![0; shots - (n - 1)];
            classes.extend(1..n);
            correct(classes, true)
        }
        ConditionKind::ExcludeLabel(l) => {
            let ex = task.class_of(l)?;
            let rest: Vec<usize> = all.iter().copied().filter(|&c| c != ex).collect();
            correct(even_split(shots, &rest), true)
        }
        ConditionKind::GpMultitoken(p) => {
            let (classes, labels) = uniform(class_of_polarity(task, p)?);
            Layout {
                classes,
                labels,
                shuffle: false,
            }
        }
        ConditionKind::GpSingleTokenControl => {
            let c = 1 - q;
            Layout {
                classes: vec![c; shots],
                labels: vec![single_label(&task.labels[c]).to_string(); shots],
                shuffle: false,
            }
        }
        ConditionKind::CtrlSingleToken => {
            if !shots.is_multiple_of(n) {
                return Err(FixlabError::Prompt(format!(
                    "balanced control needs shots divisible by {n}, got {shots}"
                )));
            }
            let classes = even_split(shots, &all);
            let labels = classes
                .iter()
                .map(|&c| single_label(&task.labels[c]).to_string())
                .collect();
            Layout {
                classes,
                labels,
                shuffle: true,
            }
        }
    })
}

/// Render `spec` for `query` and tokenize it.
pub fn build_prompt(task: &Task, spec: &ConditionSpec, query: &Item, tokenizer: &Tokenizer) -> Result<PromptInstance> {
    spec.validate()?;
    let q = query_class(task, &spec.kind)?;
    if query.class != q || task.item(&query.id)? != query {
        return Err(FixlabError::Prompt(format!(
            "condition `{}` queries class `{}`, got item `{}`",
            spec.kind, task.labels[q], query.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(task, spec, query));
    let lay = layout(task, spec, q, &mut rng)?;

    // draw items per class, never the query
    let mut draws: Vec<Vec<&Item>> = Vec::with_capacity(task.labels.len());
    for (c, pool) in task.pools.iter().enumerate() {
        let need = lay.classes.iter().filter(|&&x| x == c).count();
        let mut avail: Vec<&Item> = pool.iter().filter(|i| i.id != query.id).collect();
        if need > avail.len() {
            return Err(FixlabError::Prompt(format!(
                "pool `{}` exhausted: need {need} demos, {} available",
                task.labels[c],
                avail.len()
            )));
        }
        avail.shuffle(&mut rng);
        avail.truncate(need);
        draws.push(avail);
    }
    let mut cursor = vec![0usize; task.labels.len()];
    let mut demos: Vec<(&Item, String)> = lay
        .classes
        .iter()
        .zip(lay.labels)
        .map(|(&c, l)| {
            let item = draws[c][cursor[c]];
            cursor[c] += 1;
            (item, l)
        })
        .collect();
    if lay.shuffle {
        demos.shuffle(&mut rng);
    }

    let template: Template = match spec.kind {
        ConditionKind::FormatVariant(v) => render_format_variant(v)?,
        _ => task.template.clone(),
    };
    let pairs: Vec<(String, String)> = demos.iter().map(|(i, l)| (i.text.clone(), l.clone())).collect();
    let text = template.render(&pairs, &query.text);
    let token_ids = tokenizer.encode_with_bos(&text)?;
    let suffix = tokenizer.encode(&template.query(&query.text))?;
    let query_suffix_len = if !suffix.is_empty() && token_ids.ends_with(&suffix) {
        suffix.len()
    } else {
        1
    };

    let multitoken = is_multitoken_task(task);
    let mut demo_label_multiset = Vec::with_capacity(demos.len());
    for (_, l) in &demos {
        let ids = if l.contains(' ') {
            tokenizer.encode(&format!(" {l}"))?
        } else {
            vec![tokenizer.single_token(l)?]
        };
        demo_label_multiset.push(ids);
    }
    demo_label_multiset.sort();

    let (answer_label, answer_token, foil_labels, foil_tokens, plan) = if multitoken {
        let plan = multitoken_plan(task, tokenizer)?;
        let first = plan.prefix.first().copied().unwrap_or(plan.branches[q].1);
        (task.labels[q].clone(), first, Vec::new(), Vec::new(), Some(plan))
    } else {
        let foils: Vec<String> = (0..task.labels.len())
            .filter(|&c| c != q)
            .map(|c| task.labels[c].clone())
            .collect();
        let foil_tokens = foils.iter().map(|l| tokenizer.single_token(l)).collect::<Result<_>>()?;
        (
            task.labels[q].clone(),
            tokenizer.single_token(&task.labels[q])?,
            foils,
            foil_tokens,
            None,
        )
    };

    Ok(PromptInstance {
        task: task.name.clone(),
        condition: spec.clone(),
        query_item_id: query.id.clone(),
        text,
        token_ids,
        query_suffix_len,
        answer_label,
        answer_token,
        foil_labels,
        foil_tokens,
        demo_item_ids: demos.iter().map(|(i, _)| i.id.clone()).collect(),
        demo_labels: demos.into_iter().map(|(_, l)| l).collect(),
        demo_label_multiset,
        multitoken: plan,
    })
}

/// Token ids of `prompt` with its query line replaced by `text` (used for
/// content-free probes such as `"N/A"`).
pub fn with_query_text(task: &Task, prompt: &PromptInstance, text: &str, tokenizer: &Tokenizer) -> Result<Vec<u32>> {
    let template = match prompt.condition.kind {
        ConditionKind::FormatVariant(v) => render_format_variant(v)?,
        _ => task.template.clone(),
    };
    let query = task.item(&prompt.query_item_id)?;
    let head = prompt
        .text
        .strip_suffix(&template.query(&query.text))
        .ok_or_else(|| FixlabError::Prompt("prompt does not end with its query".into()))?;
    tokenizer.encode_with_bos(&format!("{head}{}", template.query(text)))
}

/// Multi-token verbalizer prompt: [`build_prompt`] restricted to the
/// multi-token task, which always carries the teacher-forcing plan.
pub fn build_multitoken_prompt(
    task: &Task,
    spec: &ConditionSpec,
    query: &Item,
    tokenizer: &Tokenizer,
) -> Result<PromptInstance> {
    if !is_multitoken_task(task) {
        return Err(FixlabError::Prompt(format!(
            "task `{}` has single-token labels",
            task.name
        )));
    }
    build_prompt(task, spec, query, tokenizer)
}

/// Shared-prefix decomposition of the task's verbalizers.
pub fn multitoken_plan(task: &Task, tokenizer: &Tokenizer) -> Result<MultitokenPlan> {
    let verbalizers: Vec<(String, Vec<u32>)> = task
        .labels
        .iter()
        .map(|l| Ok((l.clone(), tokenizer.encode(&format!(" {l}"))?)))
        .collect::<Result<_>>()?;
    let first = &verbalizers[0].1;
    let mut prefix_len = first.len();
    for (_, ids) in &verbalizers[1..] {
        prefix_len = prefix_len.min(first.iter().zip(ids).take_while(|(a, b)| a == b).count());
    }
    let mut branches = Vec::new();
    for (l, ids) in &verbalizers {
        let t = ids
            .get(prefix_len)
            .copied()
            .ok_or_else(|| FixlabError::Prompt(format!("verbalizer `{l}` is a prefix of another")))?;
        branches.push((l.clone(), t));
    }
    Ok(MultitokenPlan {
        two_tokens: verbalizers.iter().all(|(_, ids)| ids.len() == 2),
        prefix: first[..prefix_len].to_vec(),
        verbalizers,
        branches,
    })
}

/// Write one JSON object per prompt (keys sorted).
pub fn write_prompts_jsonl(prompts: &[PromptInstance], mut w: impl Write) -> Result<()> {
    for p in prompts {
        let v = serde_json::to_value(p)?;
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
