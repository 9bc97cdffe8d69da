use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: [usize; 2],
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },
    #[error("{op}: empty input sequence")]
    EmptySequence { op: &'static str },
}
