// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task definitions, item pools and delimiter templates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};

/// Versioned item pools shipped with the crate.
pub const BUNDLED_TASKS: &str = include_str!("../../data/tasks.json");

/// How one demonstration line is rendered: `{item_prefix}{item}{label_prefix} {label}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub item_prefix: String,
    pub label_prefix: String,
    pub separator: String,
}

impl Template {
    fn new(item_prefix: &str, label_prefix: &str, separator: &str) -> Self {
        Self {
            item_prefix: item_prefix.into(),
            label_prefix: label_prefix.into(),
            separator: separator.into(),
        }
    }

    /// One labeled demonstration.
    pub fn demo(&self, item: &str, label: &str) -> String {
        format!("{}{item}{} {label}", self.item_prefix, self.label_prefix)
    }

    /// The unlabeled query line.
    pub fn query(&self, item: &str) -> String {
        format!("{}{item}{}", self.item_prefix, self.label_prefix)
    }

    /// Demonstrations followed by the query.
    pub fn render(&self, demos: &[(String, String)], query: &str) -> String {
        let mut out = String::new();
        for (item, label) in demos {
            out.push_str(&self.demo(item, label));
            out.push_str(&self.separator);
        }
        out.push_str(&self.query(query));
        out
    }
}

/// The five delimiter conventions of the format ablation.
pub fn render_format_variant(variant_id: u8) -> Result<Template> {
    Ok(match variant_id {
        1 => Template::new("", ":", "\n"),
        2 => Template::new("Q: ", "\nA:", "\n"),
        3 => Template::new("", " ->", "\n"),
        4 => Template::new("input: ", "\nlabel:", "\n"),
        5 => Template::new("", ":", "\n\n"),
        other => {
            return Err(FixlabError::Prompt(format!(
                "unknown format variant {other} (expected 1..=5)"
            )))
        }
    })
}

/// One pool entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    /// Stable identifier `{task}:{label}:{index:02}`.
    pub id: String,
    pub text: String,
    /// Index into [`Task::labels`].
    pub class: usize,
}

/// A classification task with its pools.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub labels: Vec<String>,
    pub pools: Vec<Vec<Item>>,
    pub template: Template,
}

impl Task {
    pub fn class_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| FixlabError::Prompt(format!("task `{}` has no label `{label}`", self.name)))
    }

    pub fn item(&self, id: &str) -> Result<&Item> {
        self.pools
            .iter()
            .flatten()
            .find(|i| i.id == id)
            .ok_or_else(|| FixlabError::Prompt(format!("unknown item `{id}`")))
    }

    /// The first `n` items of class `class` (the default query set).
    pub fn query_items(&self, class: usize, n: usize) -> Result<&[Item]> {
        let pool = &self.pools[class];
        if n > pool.len() {
            return Err(FixlabError::Prompt(format!(
                "requested {n} items of `{}` but the pool holds {}",
                self.labels[class],
                pool.len()
            )));
        }
        Ok(&pool[..n])
    }
}

#[derive(Deserialize)]
struct RawClass {
    label: String,
    items: Vec<String>,
}

#[derive(Deserialize)]
struct RawTask {
    task: String,
    classes: Vec<RawClass>,
    template: Template,
}

#[derive(Deserialize)]
struct RawFile {
    #[allow(dead_code)]
    version: u32,
    tasks: Vec<RawTask>,
}

/// All tasks from one data file.
#[derive(Debug, Clone)]
pub struct TaskSet {
    tasks: Vec<Task>,
}

impl TaskSet {
    pub fn bundled() -> Result<Self> {
        Self::from_json(BUNDLED_TASKS)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FixlabError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawFile = serde_json::from_str(text)?;
        let mut tasks = Vec::new();
        for t in raw.tasks {
            let labels: Vec<String> = t.classes.iter().map(|c| c.label.clone()).collect();
            let mut seen = std::collections::HashSet::new();
            if !labels.iter().all(|l| seen.insert(l)) {
                return Err(FixlabError::Prompt(format!("task `{}` repeats a label", t.task)));
            }
            let pools: Vec<Vec<Item>> = t
                .classes
                .iter()
                .enumerate()
                .map(|(class, c)| {
                    let slug = c.label.replace(' ', "_");
                    c.items
                        .iter()
                        .enumerate()
                        .map(|(i, text)| Item {
                            id: format!("{}:{slug}:{i:02}", t.task),
                            text: text.clone(),
                            class,
                        })
                        .collect()
                })
                .collect();
            if let Some(p) = pools.iter().position(|p| p.len() < 10) {
                return Err(FixlabError::Prompt(format!(
                    "task `{}` class `{}` has fewer than 10 items",
                    t.task, labels[p]
                )));
            }
            tasks.push(Task {
                name: t.task,
                labels,
                pools,
                template: t.template,
            });
        }
        Ok(Self { tasks })
    }

    pub fn get(&self, name: &str) -> Result<&Task> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FixlabError::Prompt(format!("unknown task `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.name.as_str())
    }
}
