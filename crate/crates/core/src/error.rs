use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `mode` is 1-based when the mismatch is tied to a mode.
    #[error("shape mismatch{}: {message}", mode.map(|m| format!(" in mode {m}")).unwrap_or_default())]
    Shape { mode: Option<usize>, message: String },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at epoch {epoch}: non-finite parameters (learning rate {learning_rate}); try a smaller learning rate")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("cannot normalize slice {slice} of mode {mode}: {message}")]
    Normalization {
        mode: usize,
        slice: usize,
        message: String,
    },

    #[error("model archive {}: {message}", path.display())]
    Archive { path: PathBuf, message: String },

    #[error("unsupported tensor order {0}: operation requires a 3-mode model")]
    UnsupportedOrder(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(mode: Option<usize>, message: impl Into<String>) -> Self {
        Error::Shape {
            mode: mode.map(|m| m + 1),
            message: message.into(),
        }
    }
}
