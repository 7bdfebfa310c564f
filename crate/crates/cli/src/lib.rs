//! Experiment runner: configuration, checkpoints, the staged pipeline behind
//! the `bmd` subcommands, seed aggregation and SVG/CSV figures.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod state;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status: 2 config, 3 checkpoint, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<bmd_core::trainer::TrainError> for CliError {
    fn from(e: bmd_core::trainer::TrainError) -> Self {
        use bmd_core::trainer::TrainError;
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
