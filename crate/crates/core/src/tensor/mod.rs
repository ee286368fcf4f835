//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: contiguous row-major buffers, a dynamic
//! [`Tape`] rebuilt on every forward pass, and exactly the operations the rest
//! of the crate needs. Values are immutable once created; ops never mutate
//! their inputs. Every op output is checked for NaN/Inf so numeric failures
//! surface at the op that produced them instead of three layers downstream.

mod tape;

pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by tensor construction, tape ops, and backward passes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("non-finite value produced by {op} at flat index {index}: {value}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on a tensor detached from gradient tracking")]
    DetachedLoss,
    #[error("variable id {id} is not on this tape (len {len})")]
    ForeignVar { id: usize, len: usize },
}

/// Dense n-dimensional value: row-major contiguous `f64` buffer plus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    msg: format!("ragged rows: {} vs {}", row.len(), cols),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Marks the tensor as a differentiation root when placed on a tape.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same buffer under a new shape; fails loudly when element counts differ.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Element at a 2-D position (row-major).
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<(), TensorError> {
        for (index, &value) in self.data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { op, index, value });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn scalar_has_shape_one() {
        let t = Tensor::scalar(4.5);
        assert_eq!(t.shape(), &[1]);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 4.5);
    }

    #[test]
    fn reshape_fails_loudly() {
        let t = Tensor::zeros(vec![2, 3]);
        assert!(t.reshaped(vec![4, 2]).is_err());
        assert_eq!(t.reshaped(vec![6]).unwrap().shape(), &[6]);
    }

    #[test]
    fn assert_finite_reports_index() {
        let t = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        match t.assert_finite("test") {
            Err(TensorError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
