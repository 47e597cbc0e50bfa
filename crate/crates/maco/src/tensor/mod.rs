//! Dense tensors and the reverse-mode autodiff graph built on them.
//!
//! The engine is deliberately small: it provides exactly the primitives the
//! four network stages need (2D/1D convolution, dense layers, batch norm,
//! max pooling, ELU, concatenation, set means, softmax cross-entropy) plus
//! the bookkeeping around them (parameter stores, initializers, a
//! finite-difference gradient oracle). Precision is a type parameter:
//! training runs at `f32`, gradient checking at `f64`.

mod gradcheck;
mod graph;
mod init;
mod kernels;
mod norm;
mod params;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use graph::{GradBuffer, Graph, Var};
pub use init::{glorot_normal, lecun_normal};
pub use norm::{batch_norm_layer, batchnorm, BatchNormState, NormMode, NormStore, RunningStats};
pub use params::{BoundParams, ParamStore};

use num_traits::{Float, NumAssign, NumCast};
use std::fmt::{Debug, Display};

use crate::error::{Error, Result};

/// Floating-point element type for the engine. `f32` for training, `f64`
/// for the gradient-check suite.
pub trait Scalar:
    Float + NumAssign + NumCast + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense multi-dimensional array in row-major order.
///
/// A rank-0 tensor (empty shape) is a scalar. Zero extents are rejected so
/// every tensor holds at least one element. The optional `grad` buffer is
/// populated on parameters by [`Graph::backward`] via
/// [`BoundParams::write_grads`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("Tensor::new", "zero extents are not allowed"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Rank-1 tensor from a value list.
    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// Unvalidated constructor for op outputs whose shape is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "Tensor::item",
                format!("tensor with shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Mutable values together with the current gradient; optimizer hook.
    pub fn value_and_grad_mut(&mut self) -> (&mut [F], Option<&[F]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "Tensor::set_grad",
                format!("{} elements", self.data.len()),
                format!("{} elements", grad.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element at a multi-index; test convenience, not a hot path.
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Cast every element; used to lift f32 datasets into f64 checks.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

}
