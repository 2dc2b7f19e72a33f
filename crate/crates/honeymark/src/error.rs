//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// An image or gradient did not have the shape a model expects.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    /// A checkpoint file failed structural validation.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A checkpoint was written by a newer format revision.
    #[error("unsupported checkpoint version {found} (supported up to {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    /// A data file violated its format; names the offending field.
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    /// A gradient contained non-finite entries.
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    /// A black-box model returned an invalid response.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A pipeline stage was invoked before its inputs exist.
    #[error("missing dependency artifact: expected {0}")]
    MissingArtifact(String),

    /// The experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 success, 2 config, 3 dependency,
    /// 4 training divergence, 5 protocol, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::RejectedInput(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::TrainingDiverged { .. } => 4,
            Error::Protocol(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
