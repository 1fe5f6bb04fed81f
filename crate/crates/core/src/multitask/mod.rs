//! Modality-role configuration, the multitask model, training, metrics and
//! run artifacts.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod log;
pub mod metrics;
pub mod model;
pub mod split;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::{
    loss_for, normalize_weights, resolve_tasks, CatalogEntry, LossKind, MetricKind, ModalityRole,
    ModalityRoleConfig, Role, TargetSpec, TaskSpec,
};
pub use data::{
    Dataset, ModalityData, Normalization, SampleMeta, Split, Standardizer, TargetBatch,
};
pub use log::{metrics_from_csv, metrics_to_csv, LogRow, MetricRow, Payload, PredictionLog};
pub use model::{combine_losses, task_loss, total_loss, MultitaskModel};
pub use split::{split_grouped_stratified, SplitAssignment};
pub use train::{predict, train, RunSummary, TrainConfig, TrainOutcome};
