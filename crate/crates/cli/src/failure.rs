use ellsig_core::ErrorKind;
use ellsig_provider::ProviderError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_PRECONDITION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] ellsig_core::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Precondition(String),
}

fn core_code(e: &ellsig_core::Error) -> u8 {
    match e.kind() {
        ErrorKind::Precondition => EXIT_PRECONDITION,
        ErrorKind::Numerical => EXIT_NUMERICAL,
        ErrorKind::Io => EXIT_OTHER,
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) | Failure::Provider(ProviderError::Core(e)) => core_code(e),
            Failure::Provider(ProviderError::Config(_)) | Failure::Precondition(_) => EXIT_PRECONDITION,
            Failure::Provider(_) | Failure::Io(_) | Failure::Csv(_) => EXIT_OTHER,
        }
    }
}
