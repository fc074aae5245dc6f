use thiserror::Error;

/// Error kinds shared by every module of the pipeline.
#[derive(Debug, Error)]
pub enum LssError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation failure: {0}")]
    GenerationFailure(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LssError {
    /// Stable machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            LssError::InvalidArgument(_) => "invalid-argument",
            LssError::DegenerateInput(_) => "degenerate-input",
            LssError::NumericalFailure(_) => "numerical-failure",
            LssError::Parse(_) => "parse-error",
            LssError::Format(_) => "format-error",
            LssError::Config(_) => "configuration-error",
            LssError::GenerationFailure(_) => "generation-failure",
            LssError::Io(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, LssError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LssError::InvalidArgument(msg.into()))
}
