//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! Storage is row-major and 64-bit everywhere; there is no narrower compute
//! path. A [`Tensor`] is a plain value (shape + data) that optionally carries
//! a gradient buffer. Differentiable computation happens on a [`Tape`]:
//! leaves are registered, operations are recorded as they execute, and
//! [`Tape::backward`] walks the record in reverse, accumulating gradients
//! into every leaf that requires them. A tape is built for one forward pass
//! and dropped afterwards.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, TensorId};

use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Two operand shapes that were required to agree did not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation required a specific rank (e.g. a matrix) and got
    /// something else.
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// Provided data length does not match the shape's element count.
    DataLength { expected: usize, got: usize },
    /// A shape with a zero extent (or no axes at all) was requested.
    EmptyShape { op: &'static str },
    /// An index or row/column range fell outside the tensor.
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A reduction to scalar was expected (e.g. the loss for `backward`).
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// Operation-specific precondition failure with a short explanation.
    Invalid { op: &'static str, why: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            TensorError::RankMismatch { op, expected, shape } => {
                write!(f, "{op}: expected a rank-{expected} tensor, got shape {shape:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} elements)")
            }
            TensorError::EmptyShape { op } => write!(f, "{op}: empty shapes are not supported"),
            TensorError::OutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a single-element tensor, got shape {shape:?}")
            }
            TensorError::Invalid { op, why } => write!(f, "{op}: {why}"),
        }
    }
}

impl std::error::Error for TensorError {}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorError::EmptyShape { op: "tensor" });
    }
    Ok(shape.iter().product())
}

/// A dense row-major tensor of `f64` values.
///
/// The gradient buffer exists exactly when `requires_grad` is set; it is
/// filled in by [`Tape::backward`] (via [`Tensor::accumulate_grad`]) and
/// consumed by optimizers.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let numel = check_shape(shape)?;
        if data.len() != numel {
            return Err(TensorError::DataLength { expected: numel, got: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel = check_shape(shape).expect("tensor shapes must be non-empty");
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Gaussian-initialised tensor with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
        let numel = check_shape(shape).expect("tensor shapes must be non-empty");
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable leaf, allocating its gradient buffer.
    pub fn with_grad(mut self) -> Tensor {
        self.grad = Some(vec![0.0; self.data.len()]);
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer. No-op unless `requires_grad`.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }
}
