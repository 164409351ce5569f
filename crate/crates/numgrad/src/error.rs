//! Error type shared by the tensor kernel, graph, and optimizers.

use std::fmt;

pub type Result<T> = std::result::Result<T, NumgradError>;

#[derive(Clone, Debug, PartialEq)]
pub enum NumgradError {
    /// Constructor data does not match the declared shape.
    DataLength { expected: usize, got: usize },
    /// A scalar was required but the tensor has more than one element.
    NotScalar { shape: Vec<usize> },
    /// Kernel inputs do not conform to the kernel's arity or shapes.
    ShapeMismatch {
        kernel: &'static str,
        detail: String,
    },
    /// A kernel attribute is out of its legal range.
    InvalidAttr {
        kernel: &'static str,
        detail: String,
    },
    /// A kernel produced a NaN or infinity.
    NonFinite { kernel: &'static str, node: usize },
    /// A gradient became NaN or infinity during backpropagation.
    NonFiniteGradient { kernel: &'static str, node: usize },
    /// A leaf tensor (parameter or constant) carries non-finite values.
    NonFiniteLeaf { name: String },
    /// A parameter name was bound to the graph more than once.
    DuplicateParam { name: String },
    /// The named parameter is missing from the store.
    UnknownParam { name: String },
    /// backward() was called before a scalar loss was set.
    NoLoss,
    /// The designated loss node is not a scalar.
    LossNotScalar { shape: Vec<usize> },
    /// An optimizer update produced a non-finite parameter value.
    NonFiniteUpdate { name: String },
    /// Optimizer state shape does not match its parameter.
    StateShapeMismatch { name: String },
}

impl fmt::Display for NumgradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumgradError::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            NumgradError::NotScalar { shape } => {
                write!(f, "expected a scalar tensor, got shape {shape:?}")
            }
            NumgradError::ShapeMismatch { kernel, detail } => {
                write!(f, "kernel {kernel}: shape mismatch: {detail}")
            }
            NumgradError::InvalidAttr { kernel, detail } => {
                write!(f, "kernel {kernel}: invalid attribute: {detail}")
            }
            NumgradError::NonFinite { kernel, node } => {
                write!(f, "kernel {kernel} at node {node} produced non-finite values")
            }
            NumgradError::NonFiniteGradient { kernel, node } => {
                write!(
                    f,
                    "non-finite gradient at node {node} (kernel {kernel}) during backward"
                )
            }
            NumgradError::NonFiniteLeaf { name } => {
                write!(f, "leaf tensor '{name}' contains non-finite values")
            }
            NumgradError::DuplicateParam { name } => {
                write!(f, "parameter '{name}' bound to the graph more than once")
            }
            NumgradError::UnknownParam { name } => {
                write!(f, "parameter '{name}' not found in the store")
            }
            NumgradError::NoLoss => write!(f, "graph has no loss node set"),
            NumgradError::LossNotScalar { shape } => {
                write!(f, "loss node must be scalar, got shape {shape:?}")
            }
            NumgradError::NonFiniteUpdate { name } => {
                write!(f, "optimizer produced a non-finite update for '{name}'")
            }
            NumgradError::StateShapeMismatch { name } => {
                write!(f, "optimizer state shape mismatch for '{name}'")
            }
        }
    }
}

impl std::error::Error for NumgradError {}
