//! Error taxonomy shared by every module.
//!
//! Errors split into two families: *validation* (bad configuration, malformed
//! inputs, shape mismatches) and *runtime* (I/O failures, numerical
//! divergence). The CLI maps the former to exit code 1 and the latter to 2.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data (corpora, bundles, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Array shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numerical failure (non-finite loss, failed decomposition).
    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: validation failures exit 1, runtime
    /// failures exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) | Error::Shape(_) => 1,
            Error::Numerics(_) | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
