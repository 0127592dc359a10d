//! Minimal layer library with hand-derived backward passes.
//!
//! Activations are NHWC internally. Parameters live in a [`ParamStore`] owned
//! by each network; layers only hold [`ParamId`]s into it. Training forwards
//! return caches that the matching backward consumes.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod param;

pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::Dense;
pub use norm::BatchNorm;
pub use param::{ParamEntry, ParamId, ParamStore};

use crate::tensor::{Scalar, Tensor};

/// Which gradients a backward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradFlags {
    /// Accumulate parameter gradients into the store.
    pub params: bool,
    /// Return the gradient with respect to the layer input.
    pub input: bool,
}

impl GradFlags {
    pub const ALL: GradFlags = GradFlags {
        params: true,
        input: true,
    };
}

/// How batch normalization behaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Norm(BatchNorm),
    LeakyRelu(f64),
    Tanh,
}

pub enum LayerCache<T> {
    Conv(conv::ConvCache<T>),
    ConvT(conv::ConvTCache<T>),
    Norm(norm::NormCache<T>),
    LeakyRelu(Tensor<T>),
    Tanh(Tensor<T>),
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    /// Inference pass: running statistics, no caches kept.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, mut x: Tensor<T>) -> Tensor<T> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward(store, &x).0,
                Layer::ConvT(c) => c.forward(store, &x).0,
                Layer::Norm(n) => n.forward_eval(store, &x).0,
                Layer::LeakyRelu(s) => activation::leaky_relu(&x, *s),
                Layer::Tanh => activation::tanh(&x),
            };
        }
        x
    }

    /// Forward pass that records what the backward pass needs.
    ///
    /// In [`Mode::Train`] batch-norm running statistics are updated, hence the
    /// mutable store; [`Mode::Eval`] leaves the store untouched.
    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        mut x: Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, Vec<LayerCache<T>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, k) = c.forward(store, &x);
                    (y, LayerCache::Conv(k))
                }
                Layer::ConvT(c) => {
                    let (y, k) = c.forward(store, &x);
                    (y, LayerCache::ConvT(k))
                }
                Layer::Norm(n) => {
                    let (y, k) = match mode {
                        Mode::Train => n.forward_train(store, &x),
                        Mode::Eval => n.forward_eval(store, &x),
                    };
                    (y, LayerCache::Norm(k))
                }
                Layer::LeakyRelu(s) => (activation::leaky_relu(&x, *s), LayerCache::LeakyRelu(x)),
                Layer::Tanh => {
                    let y = activation::tanh(&x);
                    (y.clone(), LayerCache::Tanh(y))
                }
            };
            caches.push(cache);
            x = y;
        }
        (x, caches)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        caches: &[LayerCache<T>],
        mut dy: Tensor<T>,
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        assert_eq!(caches.len(), self.layers.len(), "cache/layer count");
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let layer_flags = GradFlags {
                params: flags.params,
                input: i > 0 || flags.input,
            };
            let dx = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(k)) => c.backward(store, k, &dy, layer_flags),
                (Layer::ConvT(c), LayerCache::ConvT(k)) => c.backward(store, k, &dy, layer_flags),
                (Layer::Norm(n), LayerCache::Norm(k)) => n.backward(store, k, &dy, layer_flags),
                (Layer::LeakyRelu(s), LayerCache::LeakyRelu(x)) => {
                    Some(activation::leaky_relu_backward(x, &dy, *s))
                }
                (Layer::Tanh, LayerCache::Tanh(y)) => Some(activation::tanh_backward(y, &dy)),
                _ => unreachable!("cache variant does not match layer"),
            };
            dy = dx?;
        }
        Some(dy)
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    /// Central finite difference of `f` at every coordinate of `x`.
    pub fn numeric_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + step;
                let up = f(&probe);
                probe[i] = orig - step;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// Max over coordinates of |a-n| / max(|a|, |n|, floor).
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}
