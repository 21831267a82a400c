//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Feature grids differ by more than one cell per side and cannot be aligned.
    #[error("alignment error: {0}; reconfigure the streams so grid sides differ by at most 1")]
    Alignment(String),

    /// Invalid or inconsistent configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems (missing class, empty set, bad index rows).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse (empty tape, unknown op name, evaluating nothing).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed file contents (checkpoint, image, index).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss; `param` names the first offending array.
    #[error("training diverged at epoch {epoch}: first non-finite values in `{param}`")]
    Diverged { epoch: usize, param: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
