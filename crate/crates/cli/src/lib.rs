//! Experiment runner for dual recurrent networks: configuration, training,
//! checkpoints, activation traces, gradient verification and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod trace;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Task};
pub use train::{run_training, TrainOptions, TrainSummary, Trainer};
