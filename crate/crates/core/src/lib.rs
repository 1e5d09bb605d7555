//! Channel self-supervision for online knowledge distillation.
//!
//! Two peer networks share nothing; inside each one a low-level stem feeds
//! `m` branch towers. Every branch sees the stem output with a different
//! spatial quadrant zeroed, is trained on a joint (class, transform) label
//! space, and is distilled against the branch with the same transform in
//! the other network, weighted by the networks' relative cross-entropy.
//!
//! The crate is organised bottom-up:
//!
//! - [`augmentation`]: quadrant masks over feature maps
//! - [`joint_task`]: joint labels, joint softmax/cross-entropy and test-time aggregation
//! - [`distillation`]: utility weights, tempered mutual KL and the total objective
//! - [`nn`] and [`model`]: a small CPU residual network engine and the dual multi-branch assembly
//! - [`diversity`]: branch distance statistics and transform separability probes
//! - [`harness`]: datasets, configuration, training, evaluation, checkpoints and artifacts

pub mod augmentation;
pub mod distillation;
pub mod diversity;
pub mod error;
pub mod harness;
pub mod joint_task;
pub mod model;
pub mod nn;

pub use augmentation::{apply_mask, make_mask_set, MaskSet, Quadrant};
pub use distillation::{
    kd_branch_kl, kd_loss, total_loss, utility_weights, DistillationConfig, UtilityWeights,
};
pub use diversity::{
    branch_predictions, pairwise_diversity, transform_separability, DiversityReport,
    SeparabilityReport,
};
pub use error::{CssError, Result};
pub use joint_task::{
    aggregate_logits, aggregate_predict, joint_cross_entropy, joint_softmax, make_joint_label,
    AggregatedPrediction, BranchLogits, JointLabel,
};
pub use model::{build_network, ModelSpec, Network, NetworkOutput};
