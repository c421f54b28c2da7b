use std::path::PathBuf;

use plume_core::Error as CoreError;
use plume_synth::SynthError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("no patches: {0}")]
    NoPatches(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Fingerprint(String),
    #[error("coverage gap: {0}")]
    Coverage(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NoPatches(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Fingerprint(_) => 6,
            CliError::Coverage(_) => 7,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.into().display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::InvalidParameter(_) | CoreError::Split(_) => CliError::Config(msg),
            CoreError::Io { .. }
            | CoreError::Csv(_)
            | CoreError::Json(_)
            | CoreError::RejectedRecord { .. }
            | CoreError::Integrity(_) => CliError::Io(msg),
            CoreError::Divergence(_) => CliError::Divergence(msg),
            CoreError::FingerprintMismatch { .. } => CliError::Fingerprint(msg),
            CoreError::IncompletePatch(_) | CoreError::OutOfCoverage { .. } => CliError::Coverage(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Parameter(m) => CliError::Config(m),
            SynthError::Core(c) => c.into(),
            other => CliError::Io(other.to_string()),
        }
    }
}
