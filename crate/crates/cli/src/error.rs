use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cghvp_core::Error),

    #[error("{path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },

    #[error("missing required key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },

    #[error("hash mismatch for {}: manifest records {expected:016x}, file hashes to {actual:016x}", path.display())]
    HashMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("manifest has no `{0}` entry; run the producing command first")]
    MissingArtifact(String),

    #[error("replica {replica}: {source}")]
    Replica { replica: usize, source: cghvp_core::Error },

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::Replica { source: e, .. } if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
