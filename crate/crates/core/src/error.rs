use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error in {op} at row {row}, col {col}: value {value}")]
    Domain {
        op: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iteration}: non-finite {term}")]
    Divergence { iteration: usize, term: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed {kind} file {}: {reason}", path.display())]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad inputs or flags rather than numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Divergence { .. })
    }
}
