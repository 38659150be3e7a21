use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("agreement undefined: expected agreement is 1 (all ratings fall in one category)")]
    AgreementUndefined,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of vocabulary range 0..{vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by the runtime.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Record { .. }
                | Error::Data(_)
                | Error::AgreementUndefined
                | Error::Image(_)
                | Error::Json(_)
                | Error::TokenOutOfRange { .. }
        )
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
