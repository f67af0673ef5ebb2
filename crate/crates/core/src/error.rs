use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("trajectory too short: has {got} transitions, needs at least {required}")]
    TrajectoryTooShort { got: usize, required: usize },

    #[error("invalid distribution in {context}: {detail}")]
    Distribution { context: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Config error naming the offending key.
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { key: key.into(), detail: detail.into() }
    }
}
