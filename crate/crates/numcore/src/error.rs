use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("rows have differing lengths")]
    Ragged,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
}

impl NumError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NumError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
