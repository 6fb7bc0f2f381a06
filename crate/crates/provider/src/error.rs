use thiserror::Error;

pub type Result<T> = std::result::Result<T, ProviderError>;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("server rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("extraction failed: {0}")]
    Extraction(String),
    #[error(transparent)]
    Core(#[from] ellsig_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProviderError {
    /// True for failures worth another attempt: rate limiting, server faults
    /// and transport errors.
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Rejected { status, .. } => *status == 429 || *status >= 500,
            Self::Transport { .. } => true,
            _ => false,
        }
    }
}
