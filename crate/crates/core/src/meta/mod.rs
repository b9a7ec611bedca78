//! Episodic training: configuration, optimizers, and the meta loop.

pub mod config;
pub mod optimizer;
pub mod trainer;

pub use config::{AblationFlags, MetaGradMode, TrainConfig};
pub use optimizer::{Optimizer, OptimizerKind};
pub use trainer::{
    few_shot_adapt, inner_adapt, kl_diag_gaussian, meta_iteration, metrics_csv,
    model_from_checkpoint, train, MetaStepReport, TrainOptions, TrainRun, METRICS_HEADER,
};
