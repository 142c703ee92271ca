// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal analyses built on the hookable forward pass.

pub mod dla;
pub mod enumerate;
pub mod heads;
pub mod lens;
pub mod patching;
pub mod path;
pub mod recovery;
pub mod tables;

pub use dla::{dla, dla_delta, dla_for_tokens, dla_mean, dla_sites, DlaReport};
pub use enumerate::{enumerate_layer_combos, grand_mean, layer_combos, rank_of, rank_order, ComboResult};
pub use heads::{
    cumulative_head_patch, joint_head_patch, rank_heads, zero_ablate_heads, CumulativePoint, HeadPatchReport,
    HeadResult,
};
pub use lens::{lens_from_cache, logit_lens};
pub use patching::{loo_mean_patch, loo_mean_prepared, paired_patch_item, prob, PairInput, Positions, PreparedPair};
pub use path::{path_patch, Head};
pub use recovery::{mean_recovery, ExclusionReason, RecoveryResult, EXCLUSION_THRESHOLD};
pub use tables::{combo_rows, head_rows, recovery_row, write_recovery_csv, RecoveryRow};
