use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is singular to working precision (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage} diverged at iteration {iteration} (loss = {loss})")]
    Divergence {
        stage: String,
        iteration: usize,
        loss: f64,
    },

    #[error("stage `{0}` has already been applied to this model")]
    StageApplied(&'static str),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("rotation is not orthogonal: ||R^T R - I||_F = {0:e}")]
    NotOrthogonal(f64),

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
