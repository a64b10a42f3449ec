//! Desk-scale training harness: synthetic data, the reference encoder, the
//! optimiser, the training loop and its evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod evaluate;
pub mod gradcheck;
mod kernels;
pub mod schedule;
pub mod step;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use config::{Mode, TrainConfig};
pub use dataset::{Sample, ShapesDataset};
pub use encoder::Encoder;
pub use evaluate::{evaluate, profile, EvalOptions};
pub use gradcheck::{grad_check, GradCheckReport};
pub use schedule::{lr_at, Sgd};
pub use train::{train, Diagnostics, LogRecord, TrainError, TrainOutcome};
