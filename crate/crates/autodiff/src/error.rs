use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("expected a scalar (1x1) tensor, got shape {shape:?}")]
    NotScalar { shape: [usize; 2] },
    #[error("expected a square matrix, got shape {shape:?}")]
    NotSquare { shape: [usize; 2] },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
