use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("load error in `{field}`: {detail}")]
    Load { field: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
