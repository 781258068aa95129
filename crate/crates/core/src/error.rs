use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("attention error: {0}")]
    Attention(String),
    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence { step: usize, term: String, value: f64 },
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used by the CLI error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Precondition(_) => "precondition",
            Error::Attention(_) => "attention",
            Error::Divergence { .. } => "divergence",
            Error::Version { .. } => "version",
            Error::Corrupt(_) => "corrupt",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
