//! Minimal reverse-mode autodiff over dense row-major arrays.
//!
//! Only the operations the three policy architectures need are provided:
//! strided valid convolution, 2×2 max pooling, ReLU, dense layers, a fused
//! LSTM cell and mean squared error, plus a handful of shape glue ops
//! (reshape, row/column slicing and concatenation, add, sum, scale).
//!
//! Most ops accept an optional leading batch dimension so a whole minibatch
//! goes through one GEMM call per sample instead of one tape node per sample.

mod adam;
mod checkpoint;
mod gradcheck;
mod linalg;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use gradcheck::grad_check;
pub use linalg::{gemm, Scalar};
pub use tape::{Tape, Var};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("valid zeros shape")
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid filled shape")
    }

    /// Uniform values in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(shape, data).expect("valid uniform shape")
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<(), TensorError> {
        if g.len() != self.data.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!("gradient length {} vs {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

/// Output length of a valid (unpadded) strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}
