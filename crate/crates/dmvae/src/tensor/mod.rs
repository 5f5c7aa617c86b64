//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: a shape plus flat storage behind an
//! `Arc`. Differentiable operations live on [`Tape`]; they record one node per
//! operation and [`Tape::backward`] replays the record in reverse. Tensors
//! not attached to a tape are plain values and may be shared across threads.

mod kernels;
mod tape;

pub use kernels::matmul_raw;
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Handle of a recorded operation on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("log: non-positive input {value} with clamping disabled")]
    LogDomain { value: f64 },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tensor is not attached to any tape")]
    NotOnTape,
    #[error("{op}: input tensor belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("gather: row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array of scalars in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    node: Option<NodeId>,
    tape_id: u64,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            tape_id: 0,
        })
    }

    pub fn vector(data: Vec<S>) -> Self {
        let shape = vec![data.len()];
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            tape_id: 0,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
            tape_id: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; len]),
            node: None,
            tape_id: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn tape_id(&self) -> u64 {
        self.tape_id
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<S>, node: NodeId, tape_id: u64) -> Self {
        Tensor {
            shape,
            data: Arc::new(data),
            node: Some(node),
            tape_id,
        }
    }

    pub(crate) fn attach(&self, node: NodeId, tape_id: u64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(node),
            tape_id,
        }
    }

    /// Same values, no tape attachment.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            tape_id: 0,
        }
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let t = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        let err = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(3.5f64).item(), 3.5);
    }
}
