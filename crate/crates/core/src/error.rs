use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient camera (smallest singular value {sigma:e})")]
    RankDeficient { sigma: f64 },

    #[error("degenerate frame: {0}")]
    Degenerate(String),

    #[error("zero-norm {0}")]
    ZeroNorm(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty scene")]
    EmptyScene,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::DimensionMismatch(msg.into()))
}
