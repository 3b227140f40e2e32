use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read {}: {source}", path.display())]
    Input { path: PathBuf, source: io::Error },
    #[error("malformed {} (line {line}): {source}", path.display())]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] canoe_core::Error),
    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// 2 for anything the caller can fix by changing arguments, config or
    /// input files; 1 for failed checks and runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input { .. } | Error::Parse { .. } | Error::Format(_) => 2,
            Error::Output { .. } | Error::Core(_) | Error::Check(_) => 1,
        }
    }
}
