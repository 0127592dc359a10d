use super::param::{ParamId, ParamStore};
use super::GradFlags;
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalization over the trailing (channel) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub enum NormCache<T> {
    Train { xhat: Vec<T>, inv_std: Vec<T> },
    Eval { xhat: Vec<T>, inv_std: Vec<T> },
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn affine<T: Scalar>(&self, store: &ParamStore<T>, xhat: &[T]) -> Vec<T> {
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let mut y = xhat.to_vec();
        for row in y.chunks_exact_mut(self.channels) {
            for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
                *v = g * *v + b;
            }
        }
        y
    }

    /// Normalizes with batch statistics and folds them into the running averages.
    pub fn forward_train<T: Scalar>(&self, store: &mut ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let c = self.channels;
        let rows = x.len() / c;
        let inv_rows = T::lit(1.0 / rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_rows);
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s * inv_rows);

        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_exact_mut(c) {
            for ((v, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }

        let mom = T::lit(self.momentum);
        let unbias = if rows > 1 {
            T::lit(rows as f64 / (rows - 1) as f64)
        } else {
            T::one()
        };
        for (r, &m) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
            *r = (T::one() - mom) * *r + mom * m;
        }
        for (r, &v) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
            *r = (T::one() - mom) * *r + mom * v * unbias;
        }

        let y = self.affine(store, &xhat);
        (
            Tensor::from_vec(x.shape(), y).expect("same shape"),
            NormCache::Train { xhat, inv_std },
        )
    }

    /// Normalizes with the running statistics; a fixed per-channel affine map.
    pub fn forward_eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let eps = T::lit(self.eps);
        let mean = store.value(self.running_mean).data();
        let inv_std: Vec<T> = store
            .value(self.running_var)
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_exact_mut(self.channels) {
            for ((v, &m), &is) in row.iter_mut().zip(mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        let y = self.affine(store, &xhat);
        (
            Tensor::from_vec(x.shape(), y).expect("same shape"),
            NormCache::Eval { xhat, inv_std },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        let c = self.channels;
        let (xhat, inv_std, train) = match cache {
            NormCache::Train { xhat, inv_std } => (xhat, inv_std, true),
            NormCache::Eval { xhat, inv_std } => (xhat, inv_std, false),
        };
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (drow, xrow) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] = sum_dy[j] + drow[j];
                sum_dy_xhat[j] = sum_dy_xhat[j] + drow[j] * xrow[j];
            }
        }
        if flags.params {
            for (g, &s) in store.grad_mut(self.gamma).data_mut().iter_mut().zip(&sum_dy_xhat) {
                *g = *g + s;
            }
            for (g, &s) in store.grad_mut(self.beta).data_mut().iter_mut().zip(&sum_dy) {
                *g = *g + s;
            }
        }
        if !flags.input {
            return None;
        }
        let gamma = store.value(self.gamma).data();
        let rows = dy.len() / c;
        let inv_rows = T::lit(1.0 / rows as f64);
        let mut dx = dy.data().to_vec();
        for (drow, xrow) in dx.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                let scale = gamma[j] * inv_std[j];
                drow[j] = if train {
                    scale * (drow[j] - sum_dy[j] * inv_rows - xrow[j] * sum_dy_xhat[j] * inv_rows)
                } else {
                    scale * drow[j]
                };
            }
        }
        Some(Tensor::from_vec(dy.shape(), dx).expect("same shape"))
    }
}
