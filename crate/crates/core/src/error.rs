use std::path::PathBuf;

/// Errors produced anywhere in the tracker pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}`")]
    NumericInput { op: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("box estimation failed: no target parts")]
    Estimation,

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tracker init failed: {0}")]
    Init(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
