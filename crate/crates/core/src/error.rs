use std::path::PathBuf;

use thiserror::Error;

use crate::kb::Triple;

pub type Result<T, E = FaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FaeError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("tape usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid triple {triple}: {msg}")]
    InvalidTriple { triple: Triple, msg: String },

    #[error("capacity: tail set for ({subject}, {relation}) already holds {cap} objects")]
    Capacity {
        subject: u32,
        relation: u32,
        cap: usize,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("training error at step {step}: {msg}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Training {
        step: usize,
        msg: String,
        last_good: Option<PathBuf>,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("internal assertion failed: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FaeError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for this error: 1 for bad input, 2 for runtime or numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            FaeError::Validation(_)
            | FaeError::InvalidTriple { .. }
            | FaeError::Capacity { .. }
            | FaeError::NotFound(_)
            | FaeError::Config(_)
            | FaeError::Parse { .. }
            | FaeError::Dimension { .. } => 1,
            _ => 2,
        }
    }
}
