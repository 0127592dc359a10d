//! Encoder–decoder generator.
//!
//! The encoder sees the RGB image plus the source affect broadcast as seven
//! constant channels, halves the resolution with strided convolutions until
//! a single pixel remains, and projects that to μ and log-variance heads.
//! The decoder maps the latent sample and the target affect through two dense
//! branches, concatenates them into a 1×1 feature map and doubles the
//! resolution with transposed convolutions: batch-normalized blocks up to half
//! resolution, then a final transposed convolution to RGB with tanh.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affect::{AffectVector, NUM_AFFECTS};
use crate::error::{Error, Result};
use crate::nn::{
    activation, BatchNorm, Conv2d, ConvTranspose2d, Dense, GradFlags, Layer, LayerCache, Mode,
    ParamStore, Sequential,
};
use crate::tensor::{nchw_to_nhwc, nhwc_to_nchw, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Output channels of each down-sampling block; one block per halving.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each batch-normalized up-sampling block; the final
    /// RGB layer is not listed.
    pub decoder_channels: Vec<usize>,
    /// Width of the dense branch fed by the latent vector.
    pub latent_branch: usize,
    /// Width of the dense branch fed by the target affect.
    pub affect_branch: usize,
    pub activation_slope: f64,
    pub log_var_clamp: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_dim: 128,
            encoder_channels: vec![32, 64, 128, 256, 256, 256],
            decoder_channels: vec![256, 256, 128, 64, 32],
            latent_branch: 384,
            affect_branch: 128,
            activation_slope: 0.2,
            log_var_clamp: 10.0,
        }
    }
}

impl GeneratorConfig {
    /// Number of halvings from `image_size` down to one pixel.
    pub fn depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    /// Total transposed convolutions in the decoder, the RGB layer included.
    pub fn upsampling_blocks(&self) -> usize {
        self.decoder_channels.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 4 {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 4, got {}",
                self.image_size
            )));
        }
        if self.encoder_channels.len() != self.depth() {
            return Err(Error::Config(format!(
                "image_size {} needs {} encoder blocks, got {}",
                self.image_size,
                self.depth(),
                self.encoder_channels.len()
            )));
        }
        if self.decoder_channels.len() + 1 != self.depth() {
            return Err(Error::Config(format!(
                "image_size {} needs {} decoder blocks before the RGB layer, got {}",
                self.image_size,
                self.depth() - 1,
                self.decoder_channels.len()
            )));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be >= 2".into()));
        }
        let widths = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain([&self.latent_branch, &self.affect_branch]);
        if widths.clone().any(|&c| c == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.activation_slope >= 0.0 && self.activation_slope < 1.0) {
            return Err(Error::Config("activation_slope must lie in [0, 1)".into()));
        }
        if self.log_var_clamp.is_nan() || self.log_var_clamp <= 0.0 {
            return Err(Error::Config("log_var_clamp must be positive".into()));
        }
        Ok(())
    }

    /// Channel schedule scaled by `width / 32` relative to the default, with
    /// block counts matched to `image_size`.
    pub fn scaled(image_size: usize, latent_dim: usize, width: usize) -> Self {
        let depth = image_size.trailing_zeros() as usize;
        let cap = 8 * width;
        let encoder_channels: Vec<usize> = (0..depth).map(|i| (width << i).min(cap)).collect();
        let decoder_channels: Vec<usize> = encoder_channels[..depth - 1].iter().rev().copied().collect();
        Self {
            image_size,
            latent_dim,
            encoder_channels,
            decoder_channels,
            latent_branch: 12 * width,
            affect_branch: 4 * width,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution<T = f32> {
    /// `[batch, latent_dim]`
    pub mu: Tensor<T>,
    /// `[batch, latent_dim]`, clamped.
    pub log_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector<T = f32> {
    /// `[batch, latent_dim]`
    pub z: Tensor<T>,
}

/// `z = μ + exp(log_var / 2) ⊙ ε`.
pub fn reparameterize<T: Scalar>(dist: &LatentDistribution<T>, epsilon: &Tensor<T>) -> Result<LatentVector<T>> {
    if epsilon.shape() != dist.mu.shape() || dist.log_var.shape() != dist.mu.shape() {
        return Err(Error::shape("reparameterize", dist.mu.shape(), epsilon.shape()));
    }
    let half = T::lit(0.5);
    let z = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .zip(epsilon.data())
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect();
    Ok(LatentVector {
        z: Tensor::from_vec(dist.mu.shape(), z)?,
    })
}

/// Stacks affect vectors into a `[batch, 7]` tensor.
pub fn affect_batch<T: Scalar>(affects: &[AffectVector]) -> Tensor<T> {
    let data = affects.iter().flat_map(|a| a.0.iter().map(|&v| T::lit(v))).collect();
    Tensor::from_vec(&[affects.len(), NUM_AFFECTS], data).expect("7 entries per affect")
}

/// Latent noise for [`Generator::generate`].
#[derive(Clone, Debug)]
pub enum Noise<T = f32> {
    /// `ε = 0`, so `z = μ`.
    Deterministic,
    Sample(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    encoder: Sequential,
    mu_head: Dense,
    log_var_head: Dense,
    latent_dense: Dense,
    affect_dense: Dense,
    decoder: Sequential,
}

/// Everything the generator backward pass needs from one training forward.
pub struct GenForward<T> {
    pub images: Tensor<T>,
    pub dist: LatentDistribution<T>,
    pub z: LatentVector<T>,
    epsilon: Tensor<T>,
    enc_caches: Vec<LayerCache<T>>,
    features: Tensor<T>,
    log_var_raw: Tensor<T>,
    latent_pre: Tensor<T>,
    affect_in: Tensor<T>,
    affect_pre: Tensor<T>,
    dec_caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let slope = config.activation_slope;

        let mut encoder = Sequential::default();
        let mut in_ch = 3 + NUM_AFFECTS;
        for (i, &ch) in config.encoder_channels.iter().enumerate() {
            let name = format!("encoder.block{i}");
            encoder.push(Layer::Conv(Conv2d::new(&mut store, &format!("{name}.conv"), in_ch, ch, 4, 2, 1, false, rng)));
            encoder.push(Layer::Norm(BatchNorm::new(&mut store, &format!("{name}.norm"), ch)));
            encoder.push(Layer::LeakyRelu(slope));
            in_ch = ch;
        }
        let n = config.latent_dim;
        let mu_head = Dense::new(&mut store, "encoder.mu", in_ch, n, rng);
        let log_var_head = Dense::new(&mut store, "encoder.log_var", in_ch, n, rng);

        let latent_dense = Dense::new(&mut store, "decoder.latent", n, config.latent_branch, rng);
        let affect_dense = Dense::new(&mut store, "decoder.affect", NUM_AFFECTS, config.affect_branch, rng);
        let mut decoder = Sequential::default();
        let mut in_ch = config.latent_branch + config.affect_branch;
        for (i, &ch) in config.decoder_channels.iter().enumerate() {
            let name = format!("decoder.block{i}");
            decoder.push(Layer::ConvT(ConvTranspose2d::new(&mut store, &format!("{name}.deconv"), in_ch, ch, 4, 2, 1, false, rng)));
            decoder.push(Layer::Norm(BatchNorm::new(&mut store, &format!("{name}.norm"), ch)));
            decoder.push(Layer::LeakyRelu(slope));
            in_ch = ch;
        }
        decoder.push(Layer::ConvT(ConvTranspose2d::new(&mut store, "decoder.rgb", in_ch, 3, 4, 2, 1, true, rng)));
        decoder.push(Layer::Tanh);

        Ok(Self {
            config,
            store,
            encoder,
            mu_head,
            log_var_head,
            latent_dense,
            affect_dense,
            decoder,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_images(&self, images: &Tensor<T>, affects: &Tensor<T>, context: &'static str) -> Result<()> {
        let s = self.config.image_size;
        let n = images.batch();
        if images.shape() != [n, 3, s, s] || n == 0 {
            return Err(Error::shape(context, [n, 3, s, s], images.shape()));
        }
        if affects.shape() != [n, NUM_AFFECTS] {
            return Err(Error::shape(context, [n, NUM_AFFECTS], affects.shape()));
        }
        Ok(())
    }

    /// RGB + broadcast affect channels, NHWC.
    fn encoder_input(&self, images: &Tensor<T>, affects: &Tensor<T>) -> Tensor<T> {
        let rgb = nchw_to_nhwc(images);
        let n = images.batch();
        let s = self.config.image_size;
        let c = 3 + NUM_AFFECTS;
        let mut data = Vec::with_capacity(n * s * s * c);
        for (b, pixels) in rgb.data().chunks_exact(s * s * 3).enumerate() {
            let a = &affects.data()[b * NUM_AFFECTS..(b + 1) * NUM_AFFECTS];
            for px in pixels.chunks_exact(3) {
                data.extend_from_slice(px);
                data.extend_from_slice(a);
            }
        }
        Tensor::from_vec(&[n, s, s, c], data).expect("encoder input")
    }

    fn clamp_log_var(&self, raw: &Tensor<T>) -> Tensor<T> {
        let c = T::lit(self.config.log_var_clamp);
        raw.map(|v| v.max(-c).min(c))
    }

    fn flatten(x: Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let width = x.len() / n;
        x.reshape(&[n, width]).expect("flatten")
    }

    /// Image batch `[n, 3, s, s]` and source affects `[n, 7]` to the latent
    /// Gaussian. Inference mode.
    pub fn encode(&self, images: &Tensor<T>, source: &Tensor<T>) -> Result<LatentDistribution<T>> {
        self.check_images(images, source, "encode")?;
        let h = Self::flatten(self.encoder.infer(&self.store, self.encoder_input(images, source)));
        Ok(LatentDistribution {
            mu: self.mu_head.forward(&self.store, &h),
            log_var: self.clamp_log_var(&self.log_var_head.forward(&self.store, &h)),
        })
    }

    fn check_latent(&self, z: &LatentVector<T>, target: &Tensor<T>) -> Result<()> {
        let n = z.z.batch();
        if z.z.shape() != [n, self.config.latent_dim] || n == 0 {
            return Err(Error::shape("decode latent", [n, self.config.latent_dim], z.z.shape()));
        }
        if target.shape() != [n, NUM_AFFECTS] {
            return Err(Error::shape("decode affect", [n, NUM_AFFECTS], target.shape()));
        }
        Ok(())
    }

    fn bottleneck(&self, latent_h: &Tensor<T>, affect_h: &Tensor<T>) -> Tensor<T> {
        let n = latent_h.batch();
        let (dz, da) = (self.config.latent_branch, self.config.affect_branch);
        let mut data = Vec::with_capacity(n * (dz + da));
        for b in 0..n {
            data.extend_from_slice(&latent_h.data()[b * dz..(b + 1) * dz]);
            data.extend_from_slice(&affect_h.data()[b * da..(b + 1) * da]);
        }
        Tensor::from_vec(&[n, 1, 1, dz + da], data).expect("bottleneck")
    }

    /// Latent batch and target affects `[n, 7]` to images `[n, 3, s, s]` in
    /// `[-1, 1]`. Inference mode.
    pub fn decode(&self, z: &LatentVector<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z, target)?;
        let slope = self.config.activation_slope;
        let lh = activation::leaky_relu(&self.latent_dense.forward(&self.store, &z.z), slope);
        let ah = activation::leaky_relu(&self.affect_dense.forward(&self.store, target), slope);
        let out = self.decoder.infer(&self.store, self.bottleneck(&lh, &ah));
        Ok(nhwc_to_nchw(&out))
    }

    /// Encode, sample, decode.
    pub fn generate(&self, source_images: &Tensor<T>, source: &Tensor<T>, target: &Tensor<T>, noise: &Noise<T>) -> Result<Tensor<T>> {
        let dist = self.encode(source_images, source)?;
        let z = match noise {
            Noise::Deterministic => LatentVector { z: dist.mu.clone() },
            Noise::Sample(eps) => reparameterize(&dist, eps)?,
        };
        self.decode(&z, target)
    }

    /// Training forward: batch statistics, running averages updated.
    pub fn forward_train(
        &mut self,
        images: &Tensor<T>,
        source: &Tensor<T>,
        target: &Tensor<T>,
        epsilon: &Tensor<T>,
    ) -> Result<GenForward<T>> {
        self.check_images(images, source, "generator forward")?;
        let n = images.batch();
        if target.shape() != [n, NUM_AFFECTS] {
            return Err(Error::shape("generator forward target", [n, NUM_AFFECTS], target.shape()));
        }
        let input = self.encoder_input(images, source);
        let (h, enc_caches) = self.encoder.forward(&mut self.store, input, Mode::Train);
        let features = Self::flatten(h);
        let mu = self.mu_head.forward(&self.store, &features);
        let log_var_raw = self.log_var_head.forward(&self.store, &features);
        let dist = LatentDistribution {
            mu,
            log_var: self.clamp_log_var(&log_var_raw),
        };
        let z = reparameterize(&dist, epsilon)?;

        let slope = self.config.activation_slope;
        let latent_pre = self.latent_dense.forward(&self.store, &z.z);
        let affect_pre = self.affect_dense.forward(&self.store, target);
        let bottleneck = self.bottleneck(
            &activation::leaky_relu(&latent_pre, slope),
            &activation::leaky_relu(&affect_pre, slope),
        );
        let (out, dec_caches) = self.decoder.forward(&mut self.store, bottleneck, Mode::Train);
        Ok(GenForward {
            images: nhwc_to_nchw(&out),
            dist,
            z,
            epsilon: epsilon.clone(),
            enc_caches,
            features,
            log_var_raw,
            latent_pre,
            affect_in: target.clone(),
            affect_pre,
            dec_caches,
        })
    }

    /// Accumulates parameter gradients given the loss gradients with respect
    /// to the output images and directly with respect to μ and log-variance.
    pub fn backward(&mut self, fwd: &GenForward<T>, d_images: &Tensor<T>, d_mu: &[T], d_log_var: &[T]) {
        let slope = self.config.activation_slope;
        let n = d_images.batch();
        let (dz_w, da_w) = (self.config.latent_branch, self.config.affect_branch);
        let d_out = nchw_to_nhwc(d_images);
        let d_bottleneck = self
            .decoder
            .backward(&mut self.store, &fwd.dec_caches, d_out, GradFlags::ALL)
            .expect("input grad requested");

        let mut d_lh = Vec::with_capacity(n * dz_w);
        let mut d_ah = Vec::with_capacity(n * da_w);
        for row in d_bottleneck.data().chunks_exact(dz_w + da_w) {
            d_lh.extend_from_slice(&row[..dz_w]);
            d_ah.extend_from_slice(&row[dz_w..]);
        }
        let d_lh = Tensor::from_vec(&[n, dz_w], d_lh).expect("latent branch");
        let d_ah = Tensor::from_vec(&[n, da_w], d_ah).expect("affect branch");
        let d_latent_pre = activation::leaky_relu_backward(&fwd.latent_pre, &d_lh, slope);
        let d_affect_pre = activation::leaky_relu_backward(&fwd.affect_pre, &d_ah, slope);
        self.affect_dense.backward(
            &mut self.store,
            &fwd.affect_in,
            &d_affect_pre,
            GradFlags { params: true, input: false },
        );
        let dz = self
            .latent_dense
            .backward(&mut self.store, &fwd.z.z, &d_latent_pre, GradFlags::ALL)
            .expect("input grad requested");

        let half = T::lit(0.5);
        let clamp = T::lit(self.config.log_var_clamp);
        let mut dmu = d_mu.to_vec();
        let mut dlv = d_log_var.to_vec();
        for i in 0..dmu.len() {
            let g = dz.data()[i];
            let lv = fwd.dist.log_var.data()[i];
            dmu[i] = dmu[i] + g;
            dlv[i] = dlv[i] + g * fwd.epsilon.data()[i] * half * (lv * half).exp();
            let raw = fwd.log_var_raw.data()[i];
            if raw > clamp || raw < -clamp {
                dlv[i] = T::zero();
            }
        }
        let shape = fwd.dist.mu.shape();
        let dmu = Tensor::from_vec(shape, dmu).expect("mu grad");
        let dlv = Tensor::from_vec(shape, dlv).expect("log_var grad");
        let dh_mu = self
            .mu_head
            .backward(&mut self.store, &fwd.features, &dmu, GradFlags::ALL)
            .expect("input grad requested");
        let dh_lv = self
            .log_var_head
            .backward(&mut self.store, &fwd.features, &dlv, GradFlags::ALL)
            .expect("input grad requested");
        let c = fwd.features.shape()[1];
        let dh: Vec<T> = dh_mu.data().iter().zip(dh_lv.data()).map(|(&a, &b)| a + b).collect();
        let dh = Tensor::from_vec(&[n, 1, 1, c], dh).expect("feature grad");
        self.encoder.backward(
            &mut self.store,
            &fwd.enc_caches,
            dh,
            GradFlags { params: true, input: false },
        );
    }
}
