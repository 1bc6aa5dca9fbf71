use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("duplicate leaf name `{0}`")]
    DuplicateName(String),
    #[error("backward called before the tape was evaluated (node {0} has no value)")]
    NotEvaluated(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("masks {0} and {1} overlap")]
    OverlappingMasks(usize, usize),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("non-finite loss rejected: {0}")]
    NonFiniteLoss(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
