//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not compatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeExpected {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: produced non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("log: non-positive input {value} at flat index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("backward: root must be scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("pool: extent {extent} along axis {axis} is not tileable by kernel {kernel} / stride {stride}")]
    PoolShape {
        axis: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("label {label} at flat index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible generation target: {0}")]
    Infeasible(String),
    #[error("malformed tensor bytes: {0}")]
    Codec(String),
    #[error("non-finite gradient in layer '{layer}'")]
    NanGrad { layer: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}
