// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenization, task pools and prompt construction.

pub mod build;
pub mod condition;
pub mod tasks;
pub mod tokenizer;

pub use build::{
    build_multitoken_prompt, build_prompt, multitoken_plan, query_class, with_query_text, write_prompts_jsonl,
    MultitokenPlan, PromptInstance,
};
pub use condition::{ConditionKind, ConditionSpec, NONSENSE};
pub use tasks::{render_format_variant, Item, Task, TaskSet, Template};
pub use tokenizer::{verify_single_token, Tokenizer};
