use std::fmt;
use std::process::ExitCode;

use implicit_sent::data::DataError;
use implicit_sent::training::{ReplicateFailure, TrainError};
use implicit_sent::ModelError;

/// Exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    /// Bad usage or configuration.
    Config = 1,
    /// Missing or malformed input files.
    Data = 2,
    /// Training or numeric failure.
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Failure, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Failure::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Failure::Data, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(Failure::Numeric, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::config(e.to_string()),
            ModelError::Tensor(_) => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(_) => CliError::config(e.to_string()),
            TrainError::Log(_) => CliError::data(e.to_string()),
            _ => CliError::numeric(e.to_string()),
        }
    }
}

impl From<ReplicateFailure> for CliError {
    fn from(e: ReplicateFailure) -> Self {
        let seed = e.seed;
        let mut err = CliError::from(e.error);
        err.message = format!("replicate with seed {seed} failed: {}", err.message);
        err
    }
}
