//! File-based pipeline around the `csqpt` core: simulate probe data,
//! reconstruct a process tensor, analyze it, and calibrate probe amplitudes.

use std::path::{Path, PathBuf};

use thiserror::Error;

mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Data { path: PathBuf, source: csqpt::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("provenance mismatch: {0} (pass --allow-provenance-mismatch to override)")]
    Provenance(String),
    #[error(transparent)]
    Core(#[from] csqpt::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, source: csqpt::Error) -> Self {
        Self::Data { path: path.to_path_buf(), source }
    }

    /// 1 for I/O, format and physics-domain failures, 2 for usage, 3 for provenance.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Provenance(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
