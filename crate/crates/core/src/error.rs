use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numerical domain error: {0}")]
    Numerical(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn ensure_same_dims(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return arg_err(format!("{what}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}
