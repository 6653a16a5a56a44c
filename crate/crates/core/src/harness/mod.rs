//! Experiment driver: scheme configuration, test-phase BLER evaluation,
//! sweeps and their CSV/JSON outputs.

mod config;
mod eval;
mod experiment;
pub mod selftest;

pub use config::{Axis, ExperimentConfig, Scheme, SweepConfig, TestConfig};
pub use eval::{
    evaluate_bler, evaluate_receiver, payload_share, simulate_test_frame, BlerEstimate, Receiver,
    SchemeReceiver, TestFrame, TrainedSystem,
};
pub use experiment::{
    append_results, git_describe, read_history, read_results, run_experiment, run_experiment_in,
    train_system, write_history, write_results, BlerRecord, ExperimentOutput, HistoryRow, Manifest,
    TrainingRun, RESULTS_HEADER,
};

use thiserror::Error;

use crate::autodiff::DiffError;
use crate::baselines::BaselineError;
use crate::channel::ChannelError;
use crate::link::{CheckpointError, LinkError};
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("bad results file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Parse(_) => 2,
            HarnessError::Train(TrainError::Config { .. }) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Train(e) if e.is_numeric() => 3,
            HarnessError::Link(LinkError::Diff(DiffError::NonFinite { .. })) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}
