use thiserror::Error;

#[derive(Debug, Error)]
pub enum MagtError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("anchor bank is stale: built at parameter version {built}, network is at {current}")]
    StaleBank { built: u64, current: u64 },

    #[error("Jacobian is rank deficient (min eigenvalue of JᵀJ = {min_eig:e}); the transport must have rank d almost everywhere")]
    RankDeficient { min_eig: f64 },

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl MagtError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MagtError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// the inputs or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MagtError::Numerical(_) | MagtError::RankDeficient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MagtError>;
