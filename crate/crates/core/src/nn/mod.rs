//! Minimal CPU layer library with explicit backward passes.
//!
//! Every layer exposes three entry points:
//!
//! - `infer(&self, x)`: inference mode, no state is touched, safe to share
//!   across threads;
//! - `forward(&mut self, x)`: training mode, caches what the backward pass
//!   needs and (for batch norm) uses batch statistics and updates the
//!   running estimates;
//! - `backward(&mut self, dy)`: consumes the cache, accumulates parameter
//!   gradients and returns the gradient with respect to the input.
//!
//! Tensors are `ndarray::Array4<f32>` in NCHW layout. All reductions run
//! sequentially in a fixed order, so results are bit-reproducible.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::Relu;
pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub use pool::MaxPool2d;

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He/Kaiming normal initialisation, `std = sqrt(2 / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Read-only view of a named tensor inside a module.
#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Param(&'a Param),
    Buffer(&'a ArrayD<f32>),
}

impl<'a> TensorRef<'a> {
    pub fn value(&self) -> &'a ArrayD<f32> {
        match self {
            TensorRef::Param(p) => &p.value,
            TensorRef::Buffer(b) => b,
        }
    }

    pub fn is_param(&self) -> bool {
        matches!(self, TensorRef::Param(_))
    }
}

/// Mutable view of a named tensor inside a module.
#[derive(Debug)]
pub enum TensorMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut ArrayD<f32>),
}

impl TensorMut<'_> {
    pub fn value_mut(&mut self) -> &mut ArrayD<f32> {
        match self {
            TensorMut::Param(p) => &mut p.value,
            TensorMut::Buffer(b) => b,
        }
    }
}

/// Hierarchical traversal of every parameter and buffer.
///
/// Names are dot-joined paths, e.g. `encoder.stage1.block0.conv1.weight`.
/// Traversal order is fixed by the implementation and identical for
/// `visit` and `visit_mut`.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| {
            if let TensorMut::Param(p) = t {
                p.zero_grad();
            }
        });
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.is_param() {
                n += t.value().len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("caller checked batch and spatial dims")
        .as_standard_layout()
        .into_owned()
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(x: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    let (a, b) = x.view().split_at(Axis(1), first);
    (a.as_standard_layout().into_owned(), b.as_standard_layout().into_owned())
}

/// Owned, contiguous copy (or move) of an array in standard layout.
pub(crate) fn standard(x: Array4<f32>) -> Array4<f32> {
    if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    /// `sum(y * w)` for a fixed random weighting `w`; gives a scalar
    /// objective whose gradient with respect to `y` is `w`.
    pub fn dot(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }
}
