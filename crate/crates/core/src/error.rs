use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("unresolved concept slot: {0}")]
    Binding(String),
    #[error("corrupt container: {0}")]
    Format(String),
    #[error("container version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("decoding exceeded {0} tokens without an end marker")]
    Truncated(usize),
    #[error("judge: {0}")]
    Judge(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
