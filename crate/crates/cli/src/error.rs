use std::path::Path;

use thiserror::Error;

/// Failure classes with distinct process exit codes.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] retm_core::Error),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{0}")]
    Other(String),
}

impl AppError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        AppError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Core(retm_core::Error::NumericalFailure { .. })
            | AppError::Core(retm_core::Error::DegenerateReference(_)) => 3,
            _ => 1,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(AppError::Config("x".into()).exit_code(), 2);
        let num = retm_core::Error::NumericalFailure {
            bin: Some(3),
            reason: "svd".into(),
        };
        assert_eq!(AppError::from(num).exit_code(), 3);
        assert_eq!(AppError::Other("x".into()).exit_code(), 1);
        assert_eq!(AppError::io(Path::new("a.wav"), "gone").to_string(), "a.wav: gone");
    }
}
