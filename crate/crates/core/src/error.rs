use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("under-constrained problem: {0}")]
    UnderConstrained(String),

    #[error("optimizer did not converge (last objective {last_value:e}): {reason}")]
    NonConvergence { reason: String, last_value: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::NonConvergence { .. }
            | Error::UnderConstrained(_)
            | Error::Degenerate(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
