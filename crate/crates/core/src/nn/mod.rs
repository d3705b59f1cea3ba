//! Minimal layer library with explicit forward and backward passes.
//!
//! Layers cache what their backward pass needs only when run in
//! [`Mode::Train`]. Gradients accumulate into [`Param::grad`] until
//! [`Param::zero_grad`] is called.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::Relu;
pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub use pool::MaxPool2d;

use ndarray::ArrayD;
use rand::{Rng, RngExt};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
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

/// Borrowed view of a layer's learnable tensors, keyed by dotted name.
pub type NamedParams<'a> = Vec<(String, &'a mut Param)>;

/// Borrowed view of non-learnable state (normalization running statistics).
pub type NamedBuffers<'a> = Vec<(String, &'a mut ArrayD<f64>)>;

pub trait Module {
    fn params<'a>(&'a mut self, scope: &str, out: &mut NamedParams<'a>);

    fn buffers<'a>(&'a mut self, _scope: &str, _out: &mut NamedBuffers<'a>) {}
}

/// Joins a scope and a leaf name with a dot, skipping empty scopes.
pub fn scoped(scope: &str, name: &str) -> String {
    if scope.is_empty() {
        name.to_string()
    } else {
        format!("{scope}.{name}")
    }
}

/// Fan-in scaled uniform draw in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

/// Zeroes every gradient reachable from `module`.
pub fn zero_grads<M: Module + ?Sized>(module: &mut M) {
    let mut params = Vec::new();
    module.params("", &mut params);
    for (_, p) in params {
        p.zero_grad();
    }
}

/// Total number of learnable scalars.
pub fn count_params<M: Module + ?Sized>(module: &mut M) -> usize {
    let mut params = Vec::new();
    module.params("", &mut params);
    params.iter().map(|(_, p)| p.len()).sum()
}
