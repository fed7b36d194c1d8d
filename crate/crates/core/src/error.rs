use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension error: {msg}")]
    Dim { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dim {
            op,
            msg: msg.into(),
        }
    }
}

macro_rules! bail_dim {
    ($op:expr, $($arg:tt)*) => {
        return Err($crate::error::Error::dim($op, format!($($arg)*)))
    };
}
pub(crate) use bail_dim;
