//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The primitive set is deliberately small: elementwise arithmetic, abs, exp,
//! log, fixed-exponent pow, clamp, axis/full reductions, inner product,
//! softmax, stride-1 max pooling with replicate padding, and reshape. That is
//! enough to express every loss in this crate plus the pixel classifier of
//! the training harness.

mod graph;
mod tensor;

pub use graph::{Bindings, ExprGraph, FdCoordinate, FdReport, GraphError, NodeId, Op};
pub use tensor::{strides_of, Tensor, TensorError};

pub(crate) use graph::max_pool_plane;
