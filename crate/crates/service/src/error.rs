use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed frame: {0}")]
    Frame(String),

    #[error("unexpected frame: {0}")]
    Unexpected(String),

    #[error(transparent)]
    Core(#[from] ommbrl::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Socket(Box<tungstenite::Error>),
}

impl From<tungstenite::Error> for ServiceError {
    fn from(e: tungstenite::Error) -> Self {
        ServiceError::Socket(Box::new(e))
    }
}
