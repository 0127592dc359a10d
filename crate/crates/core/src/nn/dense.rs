use rand::Rng;

use super::param::{init_normal, ParamId, ParamStore};
use super::GradFlags;
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer, `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_param(format!("{name}.weight"), init_normal(&[inputs, outputs], 0.02, rng)),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.len(), n * self.inputs, "dense input width");
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(store.value(self.bias).data());
        }
        T::gemm(
            n,
            self.inputs,
            self.outputs,
            x.data(),
            false,
            store.value(self.weight).data(),
            false,
            &mut y,
            true,
        );
        Tensor::from_vec(&[n, self.outputs], y).expect("dense output")
    }

    /// `x` is the forward input.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        let n = x.batch();
        if flags.params {
            let grad = store.grad_mut(self.weight);
            T::gemm(self.inputs, n, self.outputs, x.data(), true, dy.data(), false, grad.data_mut(), true);
            let gb = store.grad_mut(self.bias).data_mut();
            for row in dy.data().chunks_exact(self.outputs) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g = *g + v;
                }
            }
        }
        flags.input.then(|| {
            let mut dx = vec![T::zero(); n * self.inputs];
            T::gemm(n, self.outputs, self.inputs, dy.data(), false, store.value(self.weight).data(), true, &mut dx, false);
            Tensor::from_vec(x.shape(), dx).expect("dense input shape")
        })
    }
}
