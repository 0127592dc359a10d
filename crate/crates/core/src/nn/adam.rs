use super::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Moment slots line up with the store's entries.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |_: ()| {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.grad.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for ((entry, m), v) in store.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !entry.trainable {
                continue;
            }
            let params = entry.value.data_mut();
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(entry.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        store.add_buffer("b", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        *store.grad_mut(id) = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut adam = Adam::new(&store, 0.1, 0.5, 0.999);
        adam.step(&mut store);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(store.find("b").unwrap().value.data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap());
        let mut adam = Adam::new(&store, 0.05, 0.9, 0.999);
        for _ in 0..2000 {
            store.zero_grad();
            let w = store.value(id).data().to_vec();
            *store.grad_mut(id) = Tensor::from_vec(&[2], vec![2.0 * w[0], 2.0 * w[1]]).unwrap();
            adam.step(&mut store);
        }
        assert!(store.value(id).data().iter().all(|w| w.abs() < 1e-2));
    }
}
