//! The `swan-vox` pipeline: data preparation, training, evaluation, denoising and retrieval.

pub mod cli;
pub mod commands;
pub mod config;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;
use swanvox::ingest::{EmdbError, ManifestError, MeshError, MrcError};
use swanvox::latent::LatentError;
use swanvox::metrics::MetricsError;
use swanvox::network::NetworkError;
use swanvox::volume::VolumeError;

pub use cli::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Network(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Io(_) => 3,
            CliError::Network(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Other(_) => "error",
            CliError::Parse(_) => "parse",
            CliError::Io(_) => "io",
            CliError::Network(_) => "network",
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// One-line JSON record for stderr.
    pub fn record(&self, command: &str) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            code: i32,
            command: &'a str,
            message: String,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            code: self.exit_code(),
            command,
            message: self.to_string(),
        })
        .expect("record serializes")
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<MrcError> for CliError {
    fn from(e: MrcError) -> Self {
        CliError::Parse(format!("map: {e}"))
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Parse(format!("manifest: {e}")),
        }
    }
}

impl From<EmdbError> for CliError {
    fn from(e: EmdbError) -> Self {
        match e {
            EmdbError::Http { .. } | EmdbError::CacheMiss(_) => CliError::Network(e.to_string()),
            EmdbError::Io(e) => CliError::Io(e.to_string()),
            EmdbError::Metadata { .. } | EmdbError::BadAccession(_) => CliError::Parse(e.to_string()),
            EmdbError::NotFound(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Io(e) => CliError::Io(e.to_string()),
            NetworkError::Version { .. } | NetworkError::Checksum(_) | NetworkError::Checkpoint(_) => {
                CliError::Parse(format!("checkpoint: {e}"))
            }
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<LatentError> for CliError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Io(e) => CliError::Io(e.to_string()),
            LatentError::Format(_) => CliError::Parse(e.to_string()),
            LatentError::Network(e) => e.into(),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Execute one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Voxelize(a) => commands::voxelize(&a),
        Command::Curate(a) => commands::curate(&a).map(|_| ()),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Denoise(a) => commands::denoise(&a),
        Command::Neighbors(a) => commands::neighbors(&a).map(|_| ()),
    }
}
