//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The design is a dynamic tape: each forward operation appends a node to a
//! [`Tape`] and returns a [`Value`] handle. Calling [`Tape::backward`] on a
//! scalar node fills per-node gradient buffers by replaying the tape in
//! reverse. Tapes are rebuilt per forward pass, which is what allows the
//! latent refiner to differentiate with respect to an input while keeping
//! model weights frozen (frozen leaves simply do not require gradients).
//!
//! Only ranks 0..=2 exist. Reductions and matrix loops run left to right in
//! index order, so identical inputs give bit-identical outputs.

mod attention;
mod tape;

pub use attention::{multi_head_attention, AttentionParams};
pub use tape::{Tape, Value};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Binary op got non-conforming operand shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operand shape is unusable for this op (wrong rank, zero dim, bad range).
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: &'static str,
    },
    /// Buffer length does not match the product of the dimensions.
    DataLength { expected: usize, got: usize },
    /// `backward` needs a scalar loss node.
    LossNotScalar { shape: Vec<usize> },
    /// A `Value` handle does not belong to this tape.
    NotOnTape { index: usize, len: usize },
    /// Model dimension is not divisible by the head count.
    HeadSplit { d_model: usize, n_heads: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: operand shapes {lhs:?} and {rhs:?} do not conform")
            }
            TensorError::InvalidShape { op, shape, detail } => {
                write!(f, "{op}: invalid shape {shape:?} ({detail})")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::LossNotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::NotOnTape { index, len } => {
                write!(f, "value #{index} is not on this tape (len {len})")
            }
            TensorError::HeadSplit { d_model, n_heads } => {
                write!(f, "d_model {d_model} is not divisible by n_heads {n_heads}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// Owned dense tensor: row-major `f64` data plus an optional gradient buffer
/// of the same shape. Parameters and frozen inputs live in this type; tape
/// nodes copy the data in when recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            grad: None,
        }
    }

    /// Row-major matrix from a slice of rows; all rows must be equally long.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for row in rows {
            if row.len() != m {
                return Err(TensorError::InvalidShape {
                    op: "from_rows",
                    shape: vec![n, row.len()],
                    detail: "ragged rows",
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![n, m], data)
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replace the gradient buffer. The shape invariant is enforced.
    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<(), TensorError> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(TensorError::DataLength {
                    expected: self.data.len(),
                    got: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
