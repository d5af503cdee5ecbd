use thiserror::Error;

use diss_core::DissError;
use diss_service::ServiceError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<DissError> for CliError {
    fn from(e: DissError) -> Self {
        match e {
            DissError::InvalidRange { .. }
            | DissError::ShapeMismatch { .. }
            | DissError::TimestepOutOfRange { .. }
            | DissError::ConfigMismatch(_)
            | DissError::UnsupportedImage(_)
            | DissError::Decode(_)
            | DissError::Empty(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Validation { .. } => CliError::Validation(e.to_string()),
            ServiceError::Core(inner) => inner.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
