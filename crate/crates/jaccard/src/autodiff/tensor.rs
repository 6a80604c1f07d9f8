//! Dense row-major tensors over `f64`.
//!
//! Tensors are immutable value objects: every constructor validates that the
//! payload length matches the shape and that all entries are finite, so any
//! NaN/Inf produced by a computation surfaces as an error at the node that
//! produced it instead of propagating silently.

use std::fmt;

/// Error raised by [`Tensor`] constructors.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Payload length does not equal the product of the extents.
    LengthMismatch { expected: usize, actual: usize },
    /// A non-finite value (NaN or infinity) was found at the given flat index.
    NonFinite { index: usize, value: f64 },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::LengthMismatch { expected, actual } => {
                write!(f, "tensor data length {actual} does not match shape product {expected}")
            }
            TensorError::NonFinite { index, value } => {
                write!(f, "non-finite value {value} at flat index {index}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense multi-dimensional array of `f64` in row-major order.
///
/// A scalar is represented by the empty shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value: data[index] });
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar tensor with shape `[]`.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(Vec::new(), vec![value])
    }

    /// One-dimensional tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Tensor filled with a single finite value.
    pub fn filled(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The value of a scalar (or single-element) tensor.
    pub fn as_scalar(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Consumes the tensor and returns its payload.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the payload under a new shape of equal length.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Constructor for internal kernels whose caller re-validates the result.
    pub(crate) fn from_raw_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Row-major strides of a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for axis in (0..shape.len()).rev() {
        strides[axis] = acc;
        acc *= shape[axis];
    }
    strides
}
