// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer: configuration, weights, file format and the
//! hookable forward pass.

pub mod config;
pub mod format;
pub mod forward;
pub mod hooks;
pub mod ops;
pub mod weights;

pub use config::{BosPolicy, MlpKind, ModelConfig, NormKind, Positional, ResidualVariant, RopeScaling};
pub use format::{load_weights, read_weights, save_weights, write_weights, DType};
pub use forward::{
    forward_logits, forward_patched_with_capture, forward_with_cache, forward_with_patches, unembed_residual,
    validate_tokens, Capture, PrefixState,
};
pub use hooks::{ActivationCache, HookSite, PatchEntry, PatchSpec, SiteKind};
pub use weights::{LayerWeights, Tensor, WeightBundle};
