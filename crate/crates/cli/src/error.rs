//! Process-level error type: every failure maps onto one of the
//! documented exit codes.

use std::path::PathBuf;

/// Failure categories with fixed exit codes: config problems exit 2,
/// numeric failures 3, missing artifacts 4, everything else 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    MissingArtifact(PathBuf),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::MissingArtifact(p) => {
                write!(f, "missing artifact: {} (run the producing stage first)", p.display())
            }
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mmrg_core::Error> for CliError {
    fn from(e: mmrg_core::Error) -> Self {
        match e {
            mmrg_core::Error::Numeric(m) => CliError::Numeric(m),
            mmrg_core::Error::Io { ref path, ref source }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                CliError::MissingArtifact(path.clone())
            }
            mmrg_core::Error::Io { .. } => CliError::Other(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
