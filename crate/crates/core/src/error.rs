//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the forecasting and warning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration or infeasible parameter combination.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed input row; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    /// Structurally invalid data (non-monotone times, shape mismatch, ...).
    #[error("schema error: {0}")]
    Schema(String),
    /// Unknown site, channel, or other name lookup failure.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Non-finite values or otherwise degenerate numerics.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Channel with zero spread; cannot be standardized or fitted.
    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),
    /// Training diverged; identifies the epoch where the loss left ℝ.
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    /// Detector calibration could not reach the requested target.
    #[error("calibration error: {0}")]
    Calibration(String),
    /// A metric or loss was asked for on an empty set of pairs.
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    /// No labeled events were supplied to an event evaluation.
    #[error("event-free evaluation: {0}")]
    EventFree(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end:
    /// 2 = config, 3 = data, 4 = numeric/training/calibration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Lookup(_)
            | Error::EmptyBatch(_)
            | Error::EventFree(_)
            | Error::DegenerateChannel(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Training { .. } | Error::Calibration(_) => 4,
        }
    }
}
