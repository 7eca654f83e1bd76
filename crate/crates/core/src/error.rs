//! Error type shared across the toolkit.

use std::fmt;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
#[derive(Debug)]
pub enum Error {
    /// Malformed or inconsistent input data (shape mismatches, empty grids,
    /// out-of-range arguments).
    InvalidInput(String),
    /// Structurally valid input that leaves nothing to compute on
    /// (e.g. a fully masked-out warp or a ground truth with no valid pixel).
    DegenerateInput(String),
    /// Bad run configuration: unknown layer names, inconsistent flags,
    /// missing required data such as ground truth in black-box mode.
    Config(String),
    /// A model or adapter violated its contract (tap shape mismatch,
    /// out-of-range prediction, perturbation budget overrun).
    Contract(String),
    /// Non-finite values encountered during optimization.
    Numerical {
        /// Attack iteration (or optimizer step) at which the failure occurred.
        step: Option<usize>,
        message: String,
    },
    /// Training diverged.
    Training { epoch: usize, message: String },
    /// Malformed file content; `offset` is the byte position at which
    /// parsing failed, when known.
    Format {
        path: PathBuf,
        offset: Option<u64>,
        message: String,
    },
    /// Underlying I/O failure, with the path that was being accessed.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        offset: impl Into<Option<u64>>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            offset: offset.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numerical { step, message } => match step {
                Some(step) => write!(f, "numerical failure at iteration {step}: {message}"),
                None => write!(f, "numerical failure: {message}"),
            },
            Error::Training { epoch, message } => {
                write!(f, "training failure at epoch {epoch}: {message}")
            }
            Error::Format {
                path,
                offset,
                message,
            } => match offset {
                Some(offset) => write!(
                    f,
                    "format error in {} at byte {offset}: {message}",
                    path.display()
                ),
                None => write!(f, "format error in {}: {message}", path.display()),
            },
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
