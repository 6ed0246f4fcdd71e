use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unknown model `{name}` (available: {})", available.join(", "))]
    UnknownModel { name: String, available: Vec<String> },

    #[error("architecture `{arch}` is invalid: {}", issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidArch { arch: String, issues: Vec<ArchIssue> },

    #[error("{path}: byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One validation finding, tied to the offending layer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchIssue {
    pub layer: usize,
    pub msg: String,
}

impl std::fmt::Display for ArchIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {}: {}", self.layer, self.msg)
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub(crate) fn ensure_dim(
    op: &'static str,
    dim: &'static str,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            found,
        })
    }
}
