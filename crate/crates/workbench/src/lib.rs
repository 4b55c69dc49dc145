//! Experiment orchestration for the unlearning lab: configuration,
//! checkpoint files, pipeline stages and report tables.

pub mod checkpoint;
pub mod config;
mod error;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pipeline::{run_all, RunDir, TrainStage};
pub use report::{select_peak, Report};
