use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("chunk of {got} frames exceeds stream chunk size {max}")]
    ChunkTooLarge { got: usize, max: usize },
    #[error("stream is closed")]
    StreamClosed,
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },
    #[error("corrupt feature file at byte {offset}: {reason}")]
    CorruptFeatures { offset: usize, reason: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::InvalidShape(msg.into())
}
