use std::path::PathBuf;

use crate::synthgen::RejectionReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line-oriented input file failed to parse. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// File-level data problem that is not tied to one line.
    #[error("{0}")]
    Data(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Remote backend failure. `status` is the final HTTP status when one was received.
    #[error("backend error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },

    #[error("training diverged at epoch {epoch}, step {step}; last finite loss {last_finite_loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_finite_loss: f64,
    },

    #[error(
        "synthetic generation aborted: rejection rate {:.3} exceeds {:.3} ({} of {} responses rejected)",
        report.rejection_rate(), threshold, report.rejected(), report.responses()
    )]
    RejectionRateExceeded {
        report: Box<RejectionReport>,
        threshold: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// Process exit code: 2 configuration, 3 backend, 4 data or runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Backend { .. } => 3,
            _ => 4,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }
}
