//! The two-level conditional encoder/decoder, its training loop and checkpoints.

mod checkpoint;
mod config;
mod model;
mod train;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TrainConfig};
pub use model::{ForwardNodes, ForwardOutput, SwanModel};
pub use train::{evaluate, fit, train_step, CheckpointPolicy, Dataset, EpochRecord, FitOutcome, LossReport, Sample, TrainState};

use crate::quantizer::QuantizerError;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match the configured {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("quantizer: {0}")]
    Quantizer(#[from] QuantizerError),
    #[error("non-finite {term} on {item}")]
    NonFinite { term: String, item: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint does not match the config: {0}")]
    ConfigMismatch(String),
    #[error("checksum mismatch in block {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
