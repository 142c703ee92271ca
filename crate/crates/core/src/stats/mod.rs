// SPDX-License-Identifier: MIT OR Apache-2.0

//! Records and the statistics computed over them.

pub mod bootstrap;
pub mod calibration;
pub mod cv;
pub mod dose;
pub mod hypothesis;
pub mod record;
pub mod summary;

pub use bootstrap::{
    cluster_bootstrap_ci, cluster_bootstrap_groups, stream_key, BootstrapOptions, CiResult, DEFAULT_DRAWS,
};
pub use calibration::{contextual_calibration, CalibrationReport};
pub use cv::{kfold_cv, kfold_cv_select, FoldResult};
pub use dose::{dose_response, DosePoint, DoseResponse};
pub use hypothesis::{
    bonferroni, bonferroni_n, midranks, spearman, spearman_one_sided, wilcoxon_signed_rank, Alternative,
    SpearmanResult, WilcoxonResult,
};
pub use record::{accuracy_bit, audit_accuracy, InterventionRecord, LensPoint, TrialRecord};
pub use summary::StatsSummary;
