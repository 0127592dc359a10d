//! Auxiliary-classifier discriminator: three strided conv blocks, a shared
//! flatten, then a sigmoid validity head and a softmax affect head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affect::NUM_AFFECTS;
use crate::error::{Error, Result};
use crate::nn::activation::{sigmoid, softmax_rows};
use crate::nn::{BatchNorm, Conv2d, Dense, GradFlags, Layer, LayerCache, Mode, ParamStore, Sequential};
use crate::tensor::{nchw_to_nhwc, nhwc_to_nchw, Scalar, Tensor};

pub const DISC_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub activation_slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![64, 128, 256],
            activation_slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != DISC_BLOCKS {
            return Err(Error::Config(format!(
                "discriminator needs exactly {DISC_BLOCKS} blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "discriminator channels must be positive and strictly increasing: {:?}",
                self.channels
            )));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 1 << DISC_BLOCKS {
            return Err(Error::Config(format!("unsupported image_size {}", self.image_size)));
        }
        if !(self.activation_slope >= 0.0 && self.activation_slope < 1.0) {
            return Err(Error::Config("activation_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn flat_width(&self) -> usize {
        let side = self.image_size >> DISC_BLOCKS;
        side * side * self.channels[DISC_BLOCKS - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscOutput<T = f32> {
    /// Probability that each image is real, `[batch]`.
    pub validity: Vec<T>,
    /// Affect class probabilities, `[batch, 7]`.
    pub class_probs: Tensor<T>,
}

impl<T: Scalar> DiscOutput<T> {
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn probs_row(&self, i: usize) -> &[T] {
        &self.class_probs.data()[i * NUM_AFFECTS..(i + 1) * NUM_AFFECTS]
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predicted_classes(&self) -> Vec<usize> {
        (0..self.len()).map(|i| crate::affect::argmax(self.probs_row(i))).collect()
    }
}

/// Keeps a probability strictly inside (0, 1) once the sigmoid saturates.
fn open_unit<T: Scalar>(p: T) -> T {
    let below_one = T::one() - T::epsilon() / T::lit(2.0);
    p.max(T::min_positive_value()).min(below_one)
}

#[derive(Clone, Debug)]
pub struct Discriminator<T = f32> {
    config: DiscConfig,
    store: ParamStore<T>,
    trunk: Sequential,
    validity_head: Dense,
    class_head: Dense,
}

pub struct DiscForward<T> {
    caches: Vec<LayerCache<T>>,
    features: Tensor<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut trunk = Sequential::default();
        let mut in_ch = 3;
        for (i, &ch) in config.channels.iter().enumerate() {
            let name = format!("disc.block{i}");
            // The first block is left unnormalized and carries a bias instead.
            let first = i == 0;
            trunk.push(Layer::Conv(Conv2d::new(&mut store, &format!("{name}.conv"), in_ch, ch, 4, 2, 1, first, rng)));
            if !first {
                trunk.push(Layer::Norm(BatchNorm::new(&mut store, &format!("{name}.norm"), ch)));
            }
            trunk.push(Layer::LeakyRelu(config.activation_slope));
            in_ch = ch;
        }
        let width = config.flat_width();
        let validity_head = Dense::new(&mut store, "disc.validity", width, 1, rng);
        let class_head = Dense::new(&mut store, "disc.class", width, NUM_AFFECTS, rng);
        Ok(Self {
            config,
            store,
            trunk,
            validity_head,
            class_head,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        let n = images.batch();
        if images.shape() != [n, 3, s, s] || n == 0 {
            return Err(Error::shape("discriminate", [n, 3, s, s], images.shape()));
        }
        Ok(())
    }

    fn heads(&self, features: &Tensor<T>) -> DiscOutput<T> {
        let validity = self
            .validity_head
            .forward(&self.store, features)
            .data()
            .iter()
            .map(|&v| open_unit(sigmoid(v)))
            .collect();
        let class_probs = softmax_rows(&self.class_head.forward(&self.store, features));
        DiscOutput { validity, class_probs }
    }

    fn flatten(x: Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let width = x.len() / n;
        x.reshape(&[n, width]).expect("flatten")
    }

    /// Inference pass with running batch-norm statistics.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<DiscOutput<T>> {
        self.check(images)?;
        let h = self.trunk.infer(&self.store, nchw_to_nhwc(images));
        Ok(self.heads(&Self::flatten(h)))
    }

    /// Forward pass keeping caches. `Mode::Train` uses and updates batch
    /// statistics; `Mode::Eval` is the inference function, differentiable.
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<(DiscOutput<T>, DiscForward<T>)> {
        self.check(images)?;
        let (h, caches) = self.trunk.forward(&mut self.store, nchw_to_nhwc(images), mode);
        let features = Self::flatten(h);
        Ok((self.heads(&features), DiscForward { caches, features }))
    }

    /// Backward from gradients on the validity logits `[batch]` and class
    /// logits `[batch, 7]`. Returns the image gradient (NCHW) when requested.
    pub fn backward(
        &mut self,
        fwd: &DiscForward<T>,
        d_validity_logit: &[T],
        d_class_logits: &[T],
        flags: GradFlags,
    ) -> Option<Tensor<T>> {
        let n = fwd.features.batch();
        let dv = Tensor::from_vec(&[n, 1], d_validity_logit.to_vec()).expect("validity grad");
        let dc = Tensor::from_vec(&[n, NUM_AFFECTS], d_class_logits.to_vec()).expect("class grad");
        let head_flags = GradFlags {
            params: flags.params,
            input: true,
        };
        let a = self.validity_head.backward(&mut self.store, &fwd.features, &dv, head_flags)?;
        let b = self.class_head.backward(&mut self.store, &fwd.features, &dc, head_flags)?;
        let side = self.config.image_size >> DISC_BLOCKS;
        let c = self.config.channels[DISC_BLOCKS - 1];
        let dh: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let dh = Tensor::from_vec(&[n, side, side, c], dh).expect("trunk grad");
        let dx = self.trunk.backward(&mut self.store, &fwd.caches, dh, flags)?;
        Some(nhwc_to_nchw(&dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::nn::gradcheck::{max_rel_err, numeric_grad};
    use crate::nn::param::init_normal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny<T: Scalar>(seed: u64) -> Discriminator<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DiscConfig {
            image_size: 16,
            channels: vec![2, 3, 4],
            activation_slope: 0.2,
        };
        let mut d = Discriminator::new(cfg, &mut rng).unwrap();
        for e in d.store_mut().entries_mut() {
            if e.trainable && e.name.ends_with("weight") {
                e.value = init_normal(e.value.shape(), 0.4, &mut rng);
            }
        }
        d
    }

    #[test]
    fn shape_and_simplex_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::<f32>::new(DiscConfig::default(), &mut rng).unwrap();
        let x: Tensor<f32> = init_normal(&[32, 3, 64, 64], 0.5, &mut rng);
        let out = d.discriminate(&x).unwrap();
        assert_eq!(out.validity.len(), 32);
        assert_eq!(out.class_probs.shape(), &[32, 7]);
        for i in 0..32 {
            let s: f32 = out.probs_row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-5);
            assert!(out.validity[i] > 0.0 && out.validity[i] < 1.0);
        }
        assert!(d.discriminate(&Tensor::zeros(&[2, 3, 32, 32])).is_err());
    }

    #[test]
    fn config_rules() {
        let bad = DiscConfig { channels: vec![64, 64, 128], ..DiscConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DiscConfig { channels: vec![64, 128], ..DiscConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_permutation_equivariance() {
        let d = tiny::<f64>(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = init_normal(&[4, 3, 16, 16], 1.0, &mut rng);
        let out = d.discriminate(&x).unwrap();
        let perm = [2usize, 0, 3, 1];
        let parts: Vec<Tensor<f64>> = perm.iter().map(|&i| x.slice_batch(i, i + 1)).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let shuffled = d.discriminate(&Tensor::concat_batch(&refs).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(shuffled.validity[j], out.validity[i]);
            assert_eq!(shuffled.probs_row(j), out.probs_row(i));
        }
    }

    #[test]
    fn eq7_gradients_match_finite_differences_and_reach_every_parameter() {
        let mut d = tiny::<f64>(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real: Tensor<f64> = init_normal(&[3, 3, 16, 16], 0.7, &mut rng);
        let fake: Tensor<f64> = init_normal(&[3, 3, 16, 16], 0.7, &mut rng);
        let both = Tensor::concat_batch(&[&real, &fake]).unwrap();
        let a_s = [0usize, 3, 6];
        let a_t = [1usize, 1, 5];
        let targets = |labels: &[usize]| -> Vec<f64> {
            labels.iter().flat_map(|&c| (0..7).map(move |j| if j == c { 1.0 } else { 0.0 })).collect()
        };
        let (ts, tt) = (targets(&a_s), targets(&a_t));
        let objective = |d: &Discriminator<f64>| -> f64 {
            let mut d = d.clone();
            let (out, _) = d.forward(&both, Mode::Train).unwrap();
            let p = out.class_probs.data();
            let real = losses::disc_real_loss(&out.validity[..3], &p[..21], &ts).unwrap();
            let fake = losses::disc_fake_loss(&out.validity[3..], &p[21..], &tt).unwrap();
            losses::disc_total(real, fake)
        };

        d.store_mut().zero_grad();
        let mut scratch = d.clone();
        let (out, fwd) = scratch.forward(&both, Mode::Train).unwrap();
        let p = out.class_probs.data();
        let mut dv = losses::bce_logit_grad(&[1.0; 3], &out.validity[..3]);
        dv.extend(losses::bce_logit_grad(&[0.0; 3], &out.validity[3..]));
        let mut dc = losses::cce_logit_grad(&ts, &p[..21]);
        dc.extend(losses::cce_logit_grad(&tt, &p[21..]));
        let dx = d.backward(&fwd, &dv, &dc, GradFlags::ALL).unwrap();

        let num_dx = numeric_grad(both.data(), 1e-5, |v| {
            let mut dd = d.clone();
            let (out, _) = dd.forward(&Tensor::from_vec(both.shape(), v.to_vec()).unwrap(), Mode::Train).unwrap();
            let p = out.class_probs.data();
            losses::disc_real_loss(&out.validity[..3], &p[..21], &ts).unwrap()
                + losses::disc_fake_loss(&out.validity[3..], &p[21..], &tt).unwrap()
        });
        assert!(max_rel_err(dx.data(), &num_dx, 1e-6) < 1e-4);

        for idx in 0..d.store().entries().len() {
            let entry = d.store().entries()[idx].clone();
            if !entry.trainable {
                continue;
            }
            assert!(entry.grad.data().iter().any(|g| *g != 0.0), "{} has zero gradient", entry.name);
            let num = numeric_grad(entry.value.data(), 1e-5, |v| {
                let mut h = d.clone();
                h.store_mut().entries_mut()[idx].value = Tensor::from_vec(entry.value.shape(), v.to_vec()).unwrap();
                objective(&h)
            });
            let err = max_rel_err(entry.grad.data(), &num, 1e-6);
            assert!(err < 1e-4, "{}: rel err {err}", entry.name);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_stay_in_range_for_any_finite_input(scale in -1e3f64..1e3, seed in 0u64..1000) {
            let d = tiny::<f64>(7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor<f64> = init_normal(&[2, 3, 16, 16], 1.0, &mut rng);
            let out = d.discriminate(&x.map(|v| v * scale)).unwrap();
            for i in 0..2 {
                let s: f64 = out.probs_row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
                prop_assert!(out.probs_row(i).iter().all(|p| *p >= 0.0));
                prop_assert!(out.validity[i] > 0.0 && out.validity[i] < 1.0);
            }
        }
    }
}
