//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Tensors are `(N, C, H, W)` `f64` arrays. Each layer caches what its
//! backward pass needs during `forward`; `backward` accumulates parameter
//! gradients and returns the gradient with respect to the layer input.
//! Convolutions lower to a single GEMM over the whole batch (im2col), which
//! keeps summation order fixed and results deterministic.

mod act;
mod adam;
mod batchnorm;
mod conv;
mod linear;

pub use act::{sigmoid, Act, ActKind};
pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d};
pub use linear::Linear;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(mean, std).expect("valid normal");
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning trainable parameters and non-trainable buffers, visited
/// in a fixed order (the order checkpoints and optimizers rely on).
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<&ArrayD<f64>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameter values flattened in visiting order.
    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }
}
