//! Dense f64 tensor values and the error surface shared by all tensor ops.
//!
//! Everything in the model runs in 64-bit floats: the models are desk-scale
//! and exact gradient checking matters more than speed.

mod check;
mod kernels;
mod tape;

pub use check::{grad_check, grad_check_with, FdMethod, GradCheckReport};
pub use tape::{NodeId, Tape};

use thiserror::Error;

/// Errors produced by tensor construction, tape operations, and backward.
#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("dropout probability {p} outside [0, 1)")]
    BadProbability { p: f64 },
    #[error("{op}: kernel size {k} exceeds padded input length {len}")]
    KernelTooLarge {
        op: &'static str,
        k: usize,
        len: usize,
    },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major tensor of 64-bit floats.
///
/// `grad` is populated by [`Tape::backward`] for values that require
/// gradients; it always has the same number of elements as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data agreement and finiteness.
    pub fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![v], vec![1], false)
    }

    /// 1-D vector of length `n`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(data, vec![n], false)
    }

    /// 2-D matrix given row-major data.
    pub fn matrix(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        Tensor::new(data, vec![rows, cols], false)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows/cols view of a 1-D or 2-D shape; 1-D `[n]` counts as one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        let err = Tensor::new(vec![1.0, 2.0, 3.0], vec![2, 2], false).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let err = Tensor::new(vec![1.0, f64::NAN], vec![2], false).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        let err = Tensor::new(vec![f64::INFINITY], vec![1], false).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn rows_cols_of_vector_and_matrix() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.rows_cols(), (1, 3));
        let m = Tensor::matrix(vec![0.0; 6], 2, 3).unwrap();
        assert_eq!(m.rows_cols(), (2, 3));
    }
}
