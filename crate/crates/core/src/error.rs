//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shape or extent mismatch.
    Dimension(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Cell-level CSV parse failure.
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    /// Malformed file (missing header, bad magic, truncated payload).
    Format(String),
    /// Input rejected by a contract check.
    Validation(String),
    /// Graph contains a primitive with no registered gradient.
    Capability(String),
    /// Optimizer step failed; names the offending parameter.
    Optimizer(String),
    /// Timestep or subscript out of range.
    Index(String),
    /// A data invariant was violated at runtime.
    Invariant(String),
    /// Latent scale calibration failed.
    Calibration(String),
    /// Training aborted; carries diagnostics.
    Training(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Parse {
                row,
                column,
                message,
            } => write!(f, "parse error at row {row}, column \"{column}\": {message}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Capability(m) => write!(f, "capability error: {m}"),
            Error::Optimizer(m) => write!(f, "optimizer error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Invariant(m) => write!(f, "invariant violation: {m}"),
            Error::Calibration(m) => write!(f, "calibration error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
