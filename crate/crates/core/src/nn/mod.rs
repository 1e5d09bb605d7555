//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are `N x C x H x W` `f64` arrays. A layer caches what its
//! backward pass needs during a [`Mode::Train`] forward; calling `backward`
//! without one is a programming error and panics.

mod batchnorm;
mod conv;
mod linear;
pub mod resnet;
mod sgd;

use ndarray::{ArrayD, ArrayViewD};

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use resnet::{BasicBlock, ResNetStem, ResNetTower};
pub use sgd::{Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its accumulated gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub velocity: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Param {
        let zeros = ArrayD::zeros(value.raw_dim());
        Param {
            grad: zeros.clone(),
            velocity: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Walks the named tensors of a layer tree.
///
/// Trainable parameters go through `param`; non-trainable state that still
/// belongs in a checkpoint (batch-norm running statistics) through `buffer`.
pub trait Visitor {
    fn param(&mut self, name: &str, param: &mut Param);
    fn buffer(&mut self, name: &str, buffer: &mut ArrayD<f64>);
}

/// Read-only counterpart of [`Visitor`].
pub trait Inspector {
    fn param(&mut self, name: &str, param: &Param);
    fn buffer(&mut self, name: &str, buffer: ArrayViewD<'_, f64>);
}

pub trait Layer {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor);
    fn inspect(&self, prefix: &str, v: &mut dyn Inspector);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visitor adapter that zeroes every gradient.
pub struct ZeroGrad;

impl Visitor for ZeroGrad {
    fn param(&mut self, _: &str, param: &mut Param) {
        param.zero_grad();
    }
    fn buffer(&mut self, _: &str, _: &mut ArrayD<f64>) {}
}

/// Collects `(name, value)` copies of every parameter and buffer.
#[derive(Default)]
pub struct StateCollector {
    pub params: Vec<(String, ArrayD<f64>)>,
    pub buffers: Vec<(String, ArrayD<f64>)>,
}

impl Inspector for StateCollector {
    fn param(&mut self, name: &str, param: &Param) {
        self.params.push((name.to_string(), param.value.clone()));
    }
    fn buffer(&mut self, name: &str, buffer: ArrayViewD<'_, f64>) {
        self.buffers.push((name.to_string(), buffer.to_owned()));
    }
}

pub(crate) fn relu_forward(x: &mut ndarray::Array4<f64>) {
    // `max` would turn NaN into 0 and hide a divergence.
    x.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
}

/// Zeroes `grad` wherever `activation` was clipped by the ReLU.
pub(crate) fn relu_backward(grad: &mut ndarray::Array4<f64>, activation: &ndarray::Array4<f64>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}
