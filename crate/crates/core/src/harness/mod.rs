// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: plans, runs, persistence and reports.

pub mod gate;
pub mod jsonl;
pub mod measure;
pub mod plan;
pub mod report;
pub mod run;
pub mod summarize;

pub use gate::{gated_labels, single_token_gate};
pub use jsonl::{finalize, read_records, record_line, write_records, JsonlAppender};
pub use measure::{measure_prompt, P_FORMAT, P_GIVEN_PREFIX};
pub use plan::{
    default_tokenizer, site_set_label, Context, ExperimentPlan, InterventionPlan, DEFAULT_ITEMS_PER_CLASS,
    DEFAULT_SEEDS,
};
pub use report::{build_report, emit_report, Figure, ReportTable, CUMULATIVE_K};
pub use run::{build_pairs, pair_for, run_experiment, run_experiment_with, summary_path, PairedPrompt, RunOutcome};
pub use summarize::{summarize, write_summaries};
