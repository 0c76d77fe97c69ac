use std::io;
use std::path::PathBuf;

use savgrid_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Nn(NnError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl From<NnError> for CoreError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { op } => CoreError::Numerical(format!("non-finite value produced by {op}")),
            NnError::Format(detail) => CoreError::Format { kind: "checkpoint", detail },
            other => CoreError::Nn(other),
        }
    }
}

impl CoreError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 3,
            CoreError::Numerical(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::InvalidInput(msg.into()))
}
