// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};
use crate::model::{load_weights, BosPolicy, HookSite, WeightBundle};
use crate::prompts::{ConditionKind, TaskSet, Tokenizer};

/// Seeds used when a plan lists none.
pub const DEFAULT_SEEDS: [u64; 10] = [42, 0, 1, 2, 3, 7, 13, 21, 55, 99];

/// Query items drawn per class when a plan gives no count.
pub const DEFAULT_ITEMS_PER_CLASS: usize = 20;

/// Optional causal measurements attached to an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    /// Site sets, each patched jointly from the matched control.
    #[serde(default)]
    pub site_sets: Vec<Vec<HookSite>>,
    /// Condition the matched control prompts come from.
    #[serde(default = "default_control")]
    pub control: ConditionKind,
    /// Attach a logit-lens trajectory to every base record.
    #[serde(default)]
    pub lens: bool,
}

impl InterventionPlan {
    /// Patch `site_sets` from the balanced control.
    pub fn patching(site_sets: Vec<Vec<HookSite>>) -> Self {
        Self {
            site_sets,
            control: default_control(),
            lens: false,
        }
    }
}

fn default_control() -> ConditionKind {
    ConditionKind::CtrlBalanced
}

/// Label for a patched site set, e.g. `attn_out:L7+L10+L11`.
pub fn site_set_label(sites: &[HookSite]) -> String {
    let kinds: BTreeSet<String> = sites.iter().map(|s| s.kind.to_string()).collect();
    let locs: Vec<String> = sites
        .iter()
        .map(|s| match s.head {
            Some(h) => format!("L{}H{}", s.layer, h),
            None => format!("L{}", s.layer),
        })
        .collect();
    format!("{}:{}", kinds.into_iter().collect::<Vec<_>>().join("+"), locs.join("+"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub experiment_id: String,
    pub model_path: PathBuf,
    /// Name written into every record; defaults to the model file stem.
    #[serde(default)]
    pub model_name: Option<String>,
    /// Portable tokenizer file; the bundled tokenizer matching the model's
    /// BOS policy is used when absent.
    #[serde(default)]
    pub tokenizer_path: Option<PathBuf>,
    /// Task data file; the bundled pools are used when absent.
    #[serde(default)]
    pub tasks_path: Option<PathBuf>,
    pub task: String,
    pub conditions: Vec<ConditionKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_items")]
    pub items_per_class: usize,
    #[serde(default)]
    pub interventions: Option<InterventionPlan>,
    pub output: PathBuf,
    #[serde(default)]
    pub stats_seed: u64,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_shots() -> usize {
    8
}

fn default_items() -> usize {
    DEFAULT_ITEMS_PER_CLASS
}

impl ExperimentPlan {
    /// Plan with default seeds, shots and item count.
    pub fn new(
        experiment_id: impl Into<String>,
        model_path: impl Into<PathBuf>,
        task: impl Into<String>,
        conditions: Vec<ConditionKind>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            model_path: model_path.into(),
            model_name: None,
            tokenizer_path: None,
            tasks_path: None,
            task: task.into(),
            conditions,
            seeds: default_seeds(),
            shots: default_shots(),
            items_per_class: default_items(),
            interventions: None,
            output: output.into(),
            stats_seed: 0,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FixlabError::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Structural checks that need no files.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FixlabError::Harness(m));
        if self.experiment_id.is_empty() {
            return bad("experiment_id is empty".into());
        }
        if self.conditions.is_empty() {
            return bad("no conditions".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad(format!("seeds are not distinct: {:?}", self.seeds));
        }
        let conds: BTreeSet<&ConditionKind> = self.conditions.iter().collect();
        if conds.len() != self.conditions.len() {
            return bad("conditions are not distinct".into());
        }
        if self.items_per_class == 0 {
            return bad("items_per_class must be positive".into());
        }
        if let Some(iv) = &self.interventions {
            if iv.site_sets.iter().any(Vec::is_empty) {
                return bad("empty intervention site set".into());
            }
        }
        Ok(())
    }

    pub fn model_name(&self) -> String {
        self.model_name.clone().unwrap_or_else(|| {
            self.model_path
                .file_stem()
                .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
        })
    }
}

/// Everything an experiment reads: weights, tokenizer and task pools.
#[derive(Debug)]
pub struct Context {
    pub model_name: String,
    pub weights: WeightBundle,
    pub tokenizer: Tokenizer,
    pub tasks: TaskSet,
}

impl Context {
    pub fn new(
        model_name: impl Into<String>,
        weights: WeightBundle,
        tokenizer: Tokenizer,
        tasks: TaskSet,
    ) -> Result<Self> {
        if tokenizer.vocab_size() > weights.config.vocab_size {
            return Err(FixlabError::Harness(format!(
                "tokenizer has {} entries but the model vocabulary is {}",
                tokenizer.vocab_size(),
                weights.config.vocab_size
            )));
        }
        Ok(Self {
            model_name: model_name.into(),
            weights,
            tokenizer,
            tasks,
        })
    }

    /// Load the files a plan references.
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        if !plan.model_path.exists() {
            return Err(FixlabError::Harness(format!(
                "model file {} does not exist",
                plan.model_path.display()
            )));
        }
        let weights = load_weights(&plan.model_path)?;
        let tokenizer = match &plan.tokenizer_path {
            Some(p) => Tokenizer::from_file(p)?,
            None => default_tokenizer(weights.config.bos_policy)?,
        };
        let tasks = match &plan.tasks_path {
            Some(p) => TaskSet::from_file(p)?,
            None => TaskSet::bundled()?,
        };
        Self::new(plan.model_name(), weights, tokenizer, tasks)
    }
}

/// Bundled tokenizer for a model family, keyed on its BOS behaviour.
pub fn default_tokenizer(bos: BosPolicy) -> Result<Tokenizer> {
    match bos {
        BosPolicy::AutoPrepend => Tokenizer::llama3(),
        BosPolicy::None => Tokenizer::neox(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let mut p = ExperimentPlan::new("e", "m.fxb", "category", vec![ConditionKind::Gp], "out.jsonl");
        assert_eq!(p.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(p.items_per_class, 20);
        p.validate().unwrap();
        p.seeds = vec![1, 1];
        assert!(p.validate().is_err());
        assert_eq!(p.model_name(), "m");
    }

    #[test]
    fn plan_json_round_trip() {
        let text = r#"{"experiment_id":"x","model_path":"p.fxb","task":"category",
            "conditions":["gp","ctrl"],"output":"o.jsonl",
            "interventions":{"site_sets":[[{"kind":"attn_out","layer":7}]]}}"#;
        let p: ExperimentPlan = serde_json::from_str(text).unwrap();
        assert_eq!(p.conditions, vec![ConditionKind::Gp, ConditionKind::CtrlBalanced]);
        let iv = p.interventions.unwrap();
        assert_eq!(iv.control, ConditionKind::CtrlBalanced);
        assert_eq!(site_set_label(&iv.site_sets[0]), "attn_out:L7");
    }
}
