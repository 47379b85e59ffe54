use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis had the wrong extent for the operation.
    #[error("{op}: dimension error on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("config error in field `{field}`: {detail}")]
    Config { field: String, detail: String },

    /// A precondition of an operation was violated by the caller.
    #[error("{op}: contract violated: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("input resolution {height}x{width} is not a multiple of {multiple}")]
    Resolution {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("A2T1 format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
