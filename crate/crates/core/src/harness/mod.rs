//! Experiment orchestration: configuration, data, training, evaluation,
//! checkpoints and artifacts.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod protocol;
pub mod train;

pub use config::{AblationFlags, DatasetKind, ExperimentConfig};
pub use data::{load_dataset, Dataset, Splits};
pub use eval::{evaluate, evaluate_networks, Evaluation, Split};
pub use metrics::{MetricsRecord, MetricsRow, StepRecord};
pub use train::{train, TrainOutcome, Trainer};
