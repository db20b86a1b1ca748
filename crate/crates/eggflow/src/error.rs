//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {stage}{}", detail.as_deref().map(|d| format!(": {d}")).unwrap_or_default())]
    NonFinite {
        stage: String,
        detail: Option<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite for stage `{stage}`, requires: {requires}")]
    MissingPrerequisite { stage: String, requires: String },

    #[error("malformed data at {location}: {reason}")]
    Data { location: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged in stage `{stage}` at step {step}")]
    Diverged { stage: String, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite {
            stage: stage.into(),
            detail: None,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 missing prerequisite,
    /// 4 numeric divergence, 5 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Diverged { .. } | Error::NonFinite { .. } => 4,
            Error::Io { .. } | Error::Data { .. } | Error::Checkpoint(_) => 5,
            _ => 1,
        }
    }

    /// Short machine-parsable code, printed as `error[<code>]: <message>`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::MissingPrerequisite { .. } => "missing_prerequisite",
            Error::Data { .. } => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
