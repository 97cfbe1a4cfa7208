use std::path::PathBuf;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or invalid configuration. Exit code 2.
    #[error("{0}")]
    Config(String),
    /// Divergence or non-finite values during sampling. Exit code 3.
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Unexpected core failure (shape, bounds or cache bookkeeping).
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io { .. } | Self::Internal(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<clusca_core::Error> for CliError {
    fn from(e: clusca_core::Error) -> Self {
        use clusca_core::Error as E;
        match e {
            E::Config { .. } => Self::Config(e.to_string()),
            E::Divergence { .. } | E::NonFinite(_) => Self::Numeric(e.to_string()),
            E::Shape { .. } | E::Bounds { .. } | E::Policy(_) => Self::Internal(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
