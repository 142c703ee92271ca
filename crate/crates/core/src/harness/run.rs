// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment execution with crash-resume.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{FixlabError, Result};
use crate::exec::Exec;
use crate::interventions::{logit_lens, PairInput, PreparedPair};
use crate::model::HookSite;
use crate::prompts::{build_prompt, query_class, ConditionKind, ConditionSpec, Item, PromptInstance, Task};
use crate::stats::{InterventionRecord, StatsSummary, TrialRecord};

use super::gate::single_token_gate;
use super::jsonl::{finalize, read_existing, JsonlAppender};
use super::measure::{dose_of, measure_prompt};
use super::plan::{site_set_label, Context, ExperimentPlan, InterventionPlan};
use super::summarize::{summarize, write_summaries};

/// Units processed between appends.
const BATCH: usize = 64;

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Final, key-sorted records.
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<StatsSummary>,
    /// Units computed by this invocation.
    pub computed: usize,
    /// Units already present in the output.
    pub resumed: usize,
    pub summary_path: PathBuf,
}

/// One (condition, seed, query item) unit.
#[derive(Debug, Clone)]
struct Unit<'a> {
    kind: ConditionKind,
    seed: u64,
    item: &'a Item,
}

/// Path of the stats summary written next to `output`.
pub fn summary_path(output: &Path) -> PathBuf {
    output.with_extension("summary.json")
}

fn intervention_applies(task: &Task, kind: &ConditionKind, iv: &InterventionPlan) -> Result<bool> {
    if *kind == iv.control || iv.site_sets.is_empty() {
        return Ok(false);
    }
    Ok(query_class(task, kind)? == query_class(task, &iv.control)?)
}

fn expected_keys(ctx: &Context, plan: &ExperimentPlan, task: &Task, u: &Unit) -> Result<Vec<String>> {
    let mut base = TrialRecord {
        model: ctx.model_name.clone(),
        task: task.name.clone(),
        condition: u.kind.to_string(),
        shots: shots_for(plan, &u.kind),
        seed: u.seed,
        item_id: u.item.id.clone(),
        k: dose_of(&u.kind, shots_for(plan, &u.kind)),
        p_target: 0.0,
        p_foils: Vec::new(),
        p_demo_set: 0.0,
        accuracy_bit: 0,
        intervention: None,
        lens: None,
        metrics: Default::default(),
    };
    let mut keys = vec![base.key()];
    if let Some(iv) = &plan.interventions {
        if intervention_applies(task, &u.kind, iv)? {
            for set in &iv.site_sets {
                base.intervention = Some(InterventionRecord {
                    label: site_set_label(set),
                    result: crate::interventions::RecoveryResult::new(0.0, 0.0, 0.0),
                });
                keys.push(base.key());
            }
        }
    }
    Ok(keys)
}

fn shots_for(plan: &ExperimentPlan, kind: &ConditionKind) -> usize {
    if *kind == ConditionKind::ZeroShot {
        0
    } else {
        plan.shots
    }
}

fn spec_for(plan: &ExperimentPlan, kind: &ConditionKind, seed: u64) -> Result<ConditionSpec> {
    ConditionSpec::new(kind.clone(), shots_for(plan, kind), seed)
}

/// Matched GP/control pair for one unit.
pub fn pair_for(
    ctx: &Context,
    task: &Task,
    prompt: &PromptInstance,
    control: &ConditionKind,
) -> Result<(PairInput, PromptInstance)> {
    let spec = ConditionSpec::new(control.clone(), prompt.condition.shots, prompt.condition.seed)?;
    let query = task.item(&prompt.query_item_id)?;
    let ctrl = build_prompt(task, &spec, query, &ctx.tokenizer)?;
    let pair = PairInput::new(
        prompt.token_ids.clone(),
        ctrl.token_ids.clone(),
        prompt.query_suffix_len.min(ctrl.query_suffix_len),
        prompt.condition.seed,
    );
    Ok((pair, ctrl))
}

fn run_unit(ctx: &Context, plan: &ExperimentPlan, task: &Task, u: &Unit) -> Result<Vec<TrialRecord>> {
    let spec = spec_for(plan, &u.kind, u.seed)?;
    let prompt = build_prompt(task, &spec, u.item, &ctx.tokenizer)?;
    let mut base = measure_prompt(&ctx.weights, &ctx.model_name, &prompt)?;
    let mut out = Vec::new();
    if let Some(iv) = &plan.interventions {
        let single = prompt.multitoken.is_none();
        if iv.lens && single {
            base.lens = Some(logit_lens(
                &ctx.weights,
                &prompt.token_ids,
                prompt.answer_token,
                prompt.foil_tokens[0],
            )?);
        }
        if intervention_applies(task, &u.kind, iv)? {
            if !single {
                return Err(FixlabError::Harness("patching needs single-token labels".into()));
            }
            let (pair, _) = pair_for(ctx, task, &prompt, &iv.control)?;
            let all: BTreeSet<HookSite> = iv.site_sets.iter().flatten().copied().collect();
            let all: Vec<HookSite> = all.into_iter().collect();
            let prepared = PreparedPair::with_sites(&ctx.weights, &pair, prompt.answer_token, &all)?;
            for set in &iv.site_sets {
                let mut r = base.clone();
                r.lens = None;
                r.intervention = Some(InterventionRecord {
                    label: site_set_label(set),
                    result: prepared.patch(&ctx.weights, set)?,
                });
                out.push(r);
            }
        }
    }
    out.insert(0, base);
    Ok(out)
}

/// Run `plan` against a loaded context, appending to `plan.output` and
/// skipping units whose records are already there.
pub fn run_experiment_with(ctx: &Context, plan: &ExperimentPlan, exec: Exec) -> Result<RunOutcome> {
    plan.validate()?;
    let task = ctx.tasks.get(&plan.task)?;
    single_token_gate(&ctx.tokenizer, task, &plan.conditions)?;
    if let Some(iv) = &plan.interventions {
        for s in iv.site_sets.iter().flatten() {
            s.validate(&ctx.weights.config)?;
        }
    }

    let mut units = Vec::new();
    for kind in &plan.conditions {
        let q = query_class(task, kind)?;
        let items = task.query_items(q, plan.items_per_class)?;
        for &seed in &plan.seeds {
            for item in items {
                units.push(Unit {
                    kind: kind.clone(),
                    seed,
                    item,
                });
            }
        }
    }

    let done: HashSet<String> = read_existing(&plan.output)?.iter().map(TrialRecord::key).collect();
    let mut todo = Vec::new();
    for u in &units {
        let keys = expected_keys(ctx, plan, task, u)?;
        if !keys.iter().all(|k| done.contains(k)) {
            todo.push(u.clone());
        }
    }
    let resumed = units.len() - todo.len();

    let mut writer = JsonlAppender::open(&plan.output)?;
    for chunk in todo.chunks(BATCH) {
        let recs = exec.try_map(chunk, |u| run_unit(ctx, plan, task, u))?;
        let recs: Vec<TrialRecord> = recs.into_iter().flatten().collect();
        writer.append(&recs)?;
    }
    drop(writer);

    let records = finalize(&plan.output)?;
    let summaries = summarize(&records, &plan.experiment_id, plan.stats_seed, exec)?;
    let summary_path = summary_path(&plan.output);
    write_summaries(&summary_path, &summaries)?;
    Ok(RunOutcome {
        records,
        summaries,
        computed: todo.len(),
        resumed,
        summary_path,
    })
}

/// Load the plan's files and run it.
pub fn run_experiment(plan: &ExperimentPlan, exec: Exec) -> Result<RunOutcome> {
    plan.validate()?;
    let ctx = Context::load(plan)?;
    run_experiment_with(&ctx, plan, exec)
}

/// A GP-side prompt with its matched control, ready for patching.
#[derive(Debug, Clone)]
pub struct PairedPrompt {
    pub prompt: PromptInstance,
    pub control: PromptInstance,
    pub pair: PairInput,
}

/// Matched pairs over `seeds` × the first `items_per_class` query items.
pub fn build_pairs(
    ctx: &Context,
    task: &Task,
    kind: &ConditionKind,
    control: &ConditionKind,
    seeds: &[u64],
    shots: usize,
    items_per_class: usize,
) -> Result<Vec<PairedPrompt>> {
    let q = query_class(task, kind)?;
    if q != query_class(task, control)? {
        return Err(FixlabError::Harness(format!(
            "`{kind}` and `{control}` query different classes"
        )));
    }
    let mut out = Vec::new();
    for &seed in seeds {
        for item in task.query_items(q, items_per_class)? {
            let prompt = build_prompt(
                task,
                &ConditionSpec::new(kind.clone(), shots, seed)?,
                item,
                &ctx.tokenizer,
            )?;
            if prompt.multitoken.is_some() {
                return Err(FixlabError::Harness("patching needs single-token labels".into()));
            }
            let (pair, ctrl) = pair_for(ctx, task, &prompt, control)?;
            out.push(PairedPrompt {
                prompt,
                control: ctrl,
                pair,
            });
        }
    }
    Ok(out)
}
