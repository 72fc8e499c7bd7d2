use thiserror::Error;

/// Errors raised across the library.
///
/// The variants map onto the failure classes the CLI distinguishes in its
/// exit codes: configuration problems are usage errors, everything else is a
/// runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("parameter matching failed: {0}")]
    Matching(String),

    #[error("training diverged at step {step}: loss = {loss}; {snapshot}")]
    Diverged { step: usize, loss: f64, snapshot: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
