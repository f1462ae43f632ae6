use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("tensor error: {0}")]
    Tensor(diffkit::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<diffkit::Error> for Error {
    fn from(e: diffkit::Error) -> Self {
        match e {
            diffkit::Error::Format { offset, msg } => Error::Format { offset, msg },
            diffkit::Error::Dimension(m) => Error::Dimension(m),
            diffkit::Error::Config(m) => Error::Config(m),
            diffkit::Error::Degenerate(m) => Error::Degenerate(m),
            diffkit::Error::Contract(m) => Error::Contract(m),
            diffkit::Error::Io(e) => Error::Io(e),
            other => Error::Tensor(other),
        }
    }
}

impl Error {
    /// Process exit status: 2 for bad configuration, arguments or input
    /// files, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Json(_) | Error::Input(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
