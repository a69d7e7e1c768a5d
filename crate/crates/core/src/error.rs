use alloc::string::String;

/// Errors raised by the numeric core and everything built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("architecture error: {0}")]
    Arch(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("extraction error: {0}")]
    Extraction(String),
    #[error("cost error: {0}")]
    Cost(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
