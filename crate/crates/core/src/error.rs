// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout `fixlab-core`.
pub type Result<T> = std::result::Result<T, FixlabError>;

/// All failure modes surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum FixlabError {
    /// Underlying I/O failure, with the path involved when known.
    #[error("i/o error on {path:?}: {source}")]
    Io {
        /// File that was being read or written.
        path: Option<PathBuf>,
        /// Original error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Model configuration violates an invariant.
    #[error("invalid model config: {0}")]
    Config(String),

    /// Weight file header is not a valid FXB1 header.
    #[error("malformed weight header: {0}")]
    Header(String),

    /// A tensor's shape disagrees with the config.
    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        /// Tensor name.
        name: String,
        /// Shape required by the config.
        expected: Vec<usize>,
        /// Shape found in the file or bundle.
        found: Vec<usize>,
    },

    /// A required tensor is missing from the bundle.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// A tensor payload ended before its declared size.
    #[error("tensor `{name}` is truncated: need {needed} bytes, {available} available")]
    Truncated {
        /// Tensor name.
        name: String,
        /// Bytes required by the directory entry.
        needed: usize,
        /// Bytes left in the file.
        available: usize,
    },

    /// A tensor holds NaN or infinity.
    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFinite {
        /// Tensor name.
        name: String,
        /// Flat row-major index of the first offending element.
        index: usize,
    },

    /// Token sequence is empty or longer than the context window.
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength {
        /// Offending length.
        len: usize,
        /// Model context size.
        max: usize,
    },

    /// Token id outside the vocabulary.
    #[error("token id {id} at position {position} out of range (vocab {vocab})")]
    TokenOutOfRange {
        /// Offending id.
        id: u32,
        /// Position in the sequence.
        position: usize,
        /// Vocabulary size.
        vocab: usize,
    },

    /// Hook site refers to a layer or head that does not exist, or is malformed.
    #[error("invalid hook site: {0}")]
    Site(String),

    /// Patch specification is invalid (duplicate target, bad position, bad width).
    #[error("invalid patch: {0}")]
    Patch(String),

    /// Activation cache lacks an entry an operation needs.
    #[error("incomplete activation cache: missing {0}")]
    IncompleteCache(String),

    /// Intervention precondition failed.
    #[error("intervention error: {0}")]
    Intervention(String),

    /// Tokenizer file or encoding failure.
    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    /// A label does not encode to exactly one token.
    #[error("label {label:?} is not a single token: encodes to {pieces:?}")]
    NotSingleToken {
        /// Label text (without the leading space).
        label: String,
        /// Token pieces the label was split into.
        pieces: Vec<String>,
    },

    /// Prompt construction failed.
    #[error("prompt error: {0}")]
    Prompt(String),

    /// Statistical procedure precondition failed.
    #[error("statistics error: {0}")]
    Stats(String),

    /// Experiment plan or report request is invalid.
    #[error("harness error: {0}")]
    Harness(String),

    /// Report requested for conditions absent from the records.
    #[error("missing coverage for {figure}: {missing:?}")]
    Coverage {
        /// Figure or table id.
        figure: String,
        /// What was absent.
        missing: Vec<String>,
    },
}

impl FixlabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: Some(path.into()),
            source,
        }
    }
}

impl From<std::io::Error> for FixlabError {
    fn from(source: std::io::Error) -> Self {
        Self::Io { path: None, source }
    }
}
