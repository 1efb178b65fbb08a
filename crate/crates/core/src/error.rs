use std::io;

use thiserror::Error;

pub type Result<T, E = MsfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MsfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("training diverged at step {step} (scale losses {scale_losses:?})")]
    Diverged { step: usize, scale_losses: Vec<f64> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::MsfError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
