use thiserror::Error;

/// Errors produced by the separation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported rate conversion: {rate_hz} Hz is not divisible by factor {factor}")]
    UnsupportedRate { rate_hz: u32, factor: u32 },

    #[error("numerical failure{}: {reason}", .bin.map(|b| format!(" at bin {b}")).unwrap_or_default())]
    NumericalFailure { bin: Option<usize>, reason: String },

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate references: Gram matrix condition number {0:e} exceeds limit")]
    DegenerateReference(f64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Attach a frequency-bin index to a numerical failure that lacks one.
    pub fn at_bin(self, bin: usize) -> Self {
        match self {
            Error::NumericalFailure { bin: None, reason } => Error::NumericalFailure {
                bin: Some(bin),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
