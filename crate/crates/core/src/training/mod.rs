//! Splitting, training, checkpointing and evaluation.

pub mod batch;
pub mod checkpoint;
pub mod eval;
pub mod split;
pub mod train;

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, EvalReport, Predictor};
pub use split::{split_by_city, stations_by_split};
pub use train::{carve_validation, train, write_train_log, LogRow, PatchSource, TrainConfig, TrainOutcome};
