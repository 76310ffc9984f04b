use selsieve_core::Error as CoreError;
use thiserror::Error;

/// Application-level error with the process exit code baked in:
/// 1 usage, 2 data, 3 numerical failure.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            // Malformed specifications are data problems; everything else
            // arises during estimation.
            CoreError::UnknownTerm { .. } | CoreError::Invalid(_) => {
                AppError::Data(e.to_string())
            }
            _ => AppError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
