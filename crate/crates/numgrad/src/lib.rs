//! Minimal dense-tensor kernel with reverse-mode differentiation.
//!
//! Everything is 64-bit: the finite-difference checker works at 1e-4
//! relative tolerance, which single precision cannot reliably meet. Graphs
//! are rebuilt per batch (define-by-run); node values are computed eagerly
//! so callers can inspect intermediates (e.g. for hard-negative mining)
//! while still assembling the loss.

pub mod check;
pub mod error;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use check::{check_gradients, GradCheckEntry, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use error::{NumgradError, Result};
pub use graph::{BnBatchStats, ComputeGraph, Kernel, NodeId, ParamStore};
pub use optim::{step_adagrad, step_adam, AdagradState, AdamState, DEFAULT_EPSILON};
pub use tensor::Tensor;
