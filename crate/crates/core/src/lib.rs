// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod error;
pub mod exec;
pub mod harness;
pub mod interventions;
pub mod model;
pub mod prompts;
pub mod stats;

pub use error::{FixlabError, Result};
pub use exec::Exec;
