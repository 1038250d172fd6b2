use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A container file that cannot be parsed back into a map.
    #[error("malformed container: {0}")]
    Format(String),
    /// Arguments or data that violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Two checkpoints whose name sets or shapes do not line up.
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    /// Non-finite values or divergence inside numeric routines.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
