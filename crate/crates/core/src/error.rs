use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("format error in field `{field}`: {msg}")]
    Format { field: String, msg: String },
    #[error("truncated payload: expected {expected} samples, found {found}")]
    Truncation { expected: usize, found: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown key `{0}`")]
    Key(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("divergence in `{component}`: non-finite loss")]
    Divergence { component: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn size(msg: impl Into<String>) -> Self {
        Error::Size(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { field: field.into(), msg: msg.into() }
    }
}
