//! Alternating adversarial training with resumable, bit-exact state.
//!
//! Each step draws, for every source image in the batch, a target affect
//! uniformly over the seven classes, a λ for its intensity, a target frame of
//! that affect for the same identity, and the latent noise ε. The generator
//! runs forward once; the discriminator is then updated on the real batch
//! together with the detached fakes, and the generator is updated through the
//! discriminator evaluated with its running statistics.
//!
//! All randomness after initialization comes from one ChaCha stream stored in
//! the checkpoint; epoch orderings are a pure function of `(seed, epoch)`.

mod checkpoint;
mod config;
mod metrics;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{
    checksum, from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{NetworkConfig, TrainConfig};
pub use metrics::{read_metrics, MetricsLog, TrainMetrics};

use crate::affect::{self, AffectClass, AffectVector, LambdaMode, NUM_AFFECTS};
use crate::corpus::{self, derive_seed, Dataset, SampleRecord, TargetIndex};
use crate::discriminator::{DiscOutput, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{affect_batch, GenForward, Generator};
use crate::losses::{self, LossReport};
use crate::nn::{Adam, GradFlags, Mode};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;
const STEP_STREAM: u64 = 0x57e9;
const EPOCH_STREAM: u64 = 0xe90c;

/// Both networks and their optimizers.
#[derive(Clone)]
pub struct Models {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
}

impl Models {
    /// Fresh initialization, deterministic in `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT_STREAM]));
        let generator = Generator::new(config.generator_config(), &mut rng)?;
        let discriminator = Discriminator::new(config.disc_config(), &mut rng)?;
        let (b1, b2) = config.adam_betas;
        let gen_opt = Adam::new(generator.store(), config.learning_rate, b1, b2);
        let disc_opt = Adam::new(discriminator.store(), config.learning_rate, b1, b2);
        Ok(Self {
            generator,
            discriminator,
            gen_opt,
            disc_opt,
        })
    }
}

/// Mutable training progress besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STEP_STREAM])),
        }
    }
}

/// Decoded corpus with its train/validation partition.
pub struct TrainingData {
    pub dataset: Dataset,
    /// Dataset indices of the training split, in dataset order.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Pools over `train`; sampled positions index into `train`.
    targets: TargetIndex,
}

impl TrainingData {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let records = corpus::load_dataset(&config.corpus_root)?;
        if records.is_empty() {
            return Err(Error::domain(format!(
                "no images found under {}",
                config.corpus_root.display()
            )));
        }
        let dataset = Dataset::load(&config.corpus_root, records, config.image_size as u32)?;
        Self::from_dataset(dataset, config.val_fraction, config.seed)
    }

    pub fn from_dataset(dataset: Dataset, val_fraction: f64, seed: u64) -> Result<Self> {
        let (train_recs, val_recs) = corpus::split(&dataset.records, val_fraction, seed)?;
        let position: HashMap<&SampleRecord, usize> =
            dataset.records.iter().enumerate().map(|(i, r)| (r, i)).collect();
        let train = train_recs.iter().map(|r| position[r]).collect();
        let val = val_recs.iter().map(|r| position[r]).collect();
        let targets = TargetIndex::new(&train_recs);
        Ok(Self {
            dataset,
            train,
            val,
            targets,
        })
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.dataset.records[i]
    }
}

/// Everything drawn for one step.
pub struct StepBatch {
    pub source_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    pub target_classes: Vec<AffectClass>,
    pub source_images: Tensor<f32>,
    pub target_images: Tensor<f32>,
    /// One-hot source affects `[B, 7]`.
    pub source_affects: Tensor<f32>,
    /// Modulated target affects `[B, 7]`.
    pub target_affects: Tensor<f32>,
    pub epsilon: Tensor<f32>,
}

/// Points inside a step at which [`Trainer::train_step_observed`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    /// Batch drawn and generator forward done; no weights changed yet.
    BeforeDiscriminator,
    /// Discriminator updated, generator not yet.
    BeforeGenerator,
    /// Both updated.
    Done,
}

struct DiscStats {
    disc_real: f64,
    disc_fake: f64,
    disc_total_after: Option<f64>,
    real_binary_acc: f64,
    fake_binary_acc: f64,
    real_class_acc: f64,
    fake_class_acc: f64,
}

struct GenStats {
    gen_adv: f64,
    reconst: f64,
    kl: f64,
}

fn f64s(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

fn class_accuracy(out: &DiscOutput<f32>, rows: std::ops::Range<usize>, labels: &[usize]) -> f64 {
    let hits = rows
        .zip(labels)
        .filter(|&(i, &l)| affect::argmax(&f64s(out.probs_row(i))) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub state: TrainState,
    data: TrainingData,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        let models = Models::new(&config)?;
        let state = TrainState::new(config.seed);
        Self::with_state(config, data, models, state)
    }

    /// Continues from a checkpoint. `config` may change run-length and
    /// output settings but must describe the same networks.
    pub fn resume(config: TrainConfig, data: TrainingData, ckpt: Checkpoint) -> Result<Self> {
        if config.generator_config() != ckpt.config.generator_config()
            || config.disc_config() != ckpt.config.disc_config()
        {
            return Err(Error::Config(
                "checkpoint networks differ from the configured networks".into(),
            ));
        }
        Self::with_state(config, data, ckpt.models, ckpt.state)
    }

    fn with_state(config: TrainConfig, data: TrainingData, mut models: Models, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.dataset.image_size as usize != config.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from configured {}",
                data.dataset.image_size, config.image_size
            )));
        }
        if data.train.len() < config.batch_size {
            return Err(Error::Config(format!(
                "training split has {} images, fewer than one batch of {}",
                data.train.len(),
                config.batch_size
            )));
        }
        let (b1, b2) = config.adam_betas;
        for opt in [&mut models.gen_opt, &mut models.disc_opt] {
            opt.lr = config.learning_rate;
            opt.beta1 = b1;
            opt.beta2 = b2;
        }
        Ok(Self {
            config,
            models,
            state,
            data,
            epoch_cache: None,
        })
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            models: self.models,
            state: self.state,
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        to_bytes(&self.config, &self.models, &self.state)
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order = self.data.train.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, EPOCH_STREAM, epoch]));
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("just filled").1
    }

    /// Draws the next batch. Epochs drop their incomplete final batch.
    pub fn draw_batch(&mut self) -> Result<StepBatch> {
        let b = self.config.batch_size;
        let per_epoch = (self.data.train.len() / b) as u64;
        let (epoch, slot) = (self.state.step / per_epoch, (self.state.step % per_epoch) as usize);
        let source_idx = self.epoch_order(epoch)[slot * b..(slot + 1) * b].to_vec();

        let rng = &mut self.state.rng;
        let mut target_idx = Vec::with_capacity(b);
        let mut target_classes = Vec::with_capacity(b);
        let mut target_vecs: Vec<AffectVector> = Vec::with_capacity(b);
        for &src in &source_idx {
            let identity = self.data.record(src).identity_id;
            let class = AffectClass::ALL[rng.random_range(0..NUM_AFFECTS)];
            let target = match self.config.lambda_mode {
                LambdaMode::ActiveEntry => {
                    let lambda: f64 = rng.sample(StandardNormal);
                    affect::modulate(class, lambda, self.config.noise_scale)?
                }
                LambdaMode::PerEntry => {
                    let lambdas: [f64; NUM_AFFECTS] = std::array::from_fn(|_| rng.sample(StandardNormal));
                    affect::modulate_per_entry(class, &lambdas, self.config.noise_scale)?
                }
            };
            let pos = self.data.targets.sample(identity, class, rng)?;
            target_idx.push(self.data.train[pos]);
            target_classes.push(class);
            target_vecs.push(target);
        }
        let latent = self.config.latent_dim;
        let eps: Vec<f32> = (0..b * latent).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let source_vecs: Vec<AffectVector> = source_idx
            .iter()
            .map(|&i| affect::one_hot(self.data.record(i).affect))
            .collect();
        Ok(StepBatch {
            source_images: self.data.dataset.gather(&source_idx),
            target_images: self.data.dataset.gather(&target_idx),
            source_affects: affect_batch(&source_vecs),
            target_affects: affect_batch(&target_vecs),
            epsilon: Tensor::from_vec(&[b, latent], eps)?,
            source_idx,
            target_idx,
            target_classes,
        })
    }

    /// Discriminator losses on the stacked `[real; fake]` batch.
    fn disc_losses(out: &DiscOutput<f32>, batch: &StepBatch, b: usize) -> Result<(f64, f64)> {
        let v = f64s(&out.validity);
        let p = f64s(out.class_probs.data());
        let k = NUM_AFFECTS;
        let real = losses::disc_real_loss(&v[..b], &p[..b * k], &f64s(batch.source_affects.data()))?;
        let fake = losses::disc_fake_loss(&v[b..], &p[b * k..], &f64s(batch.target_affects.data()))?;
        Ok((real, fake))
    }

    fn update_discriminator(&mut self, batch: &StepBatch, fake: &Tensor<f32>) -> Result<DiscStats> {
        let b = self.config.batch_size;
        let k = NUM_AFFECTS;
        let both = Tensor::concat_batch(&[&batch.source_images, fake])?;
        let ones = vec![1.0f32; b];
        let zeros = vec![0.0f32; b];
        let disc = &mut self.models.discriminator;
        let mut first: Option<DiscStats> = None;
        for _ in 0..self.config.disc_steps_per_gen_step {
            disc.store_mut().zero_grad();
            let (out, cache) = disc.forward(&both, Mode::Train)?;
            if first.is_none() {
                let (disc_real, disc_fake) = Self::disc_losses(&out, batch, b)?;
                let real_labels: Vec<usize> = batch
                    .source_idx
                    .iter()
                    .map(|&i| self.data.record(i).affect.id())
                    .collect();
                let fake_labels: Vec<usize> = batch.target_classes.iter().map(|c| c.id()).collect();
                first = Some(DiscStats {
                    disc_real,
                    disc_fake,
                    disc_total_after: None,
                    real_binary_acc: out.validity[..b].iter().filter(|&&v| v > 0.5).count() as f64 / b as f64,
                    fake_binary_acc: out.validity[b..].iter().filter(|&&v| v < 0.5).count() as f64 / b as f64,
                    real_class_acc: class_accuracy(&out, 0..b, &real_labels),
                    fake_class_acc: class_accuracy(&out, b..2 * b, &fake_labels),
                });
            }
            // Each half is a separate mean, so each gets its own 1/B.
            let mut dv = losses::bce_logit_grad(&ones, &out.validity[..b]);
            dv.extend(losses::bce_logit_grad(&zeros, &out.validity[b..]));
            let probs = out.class_probs.data();
            let mut dc = losses::cce_logit_grad(batch.source_affects.data(), &probs[..b * k]);
            dc.extend(losses::cce_logit_grad(batch.target_affects.data(), &probs[b * k..]));
            disc.backward(&cache, &dv, &dc, GradFlags { params: true, input: false });
            self.models.disc_opt.step(disc.store_mut());
        }
        let mut stats = first.expect("at least one discriminator update");
        if self.state.step < self.config.descent_probe_steps {
            // Same batch, batch statistics again; running averages restored.
            let saved = disc.store().clone();
            let (out, _) = disc.forward(&both, Mode::Train)?;
            *disc.store_mut() = saved;
            let (r, f) = Self::disc_losses(&out, batch, b)?;
            stats.disc_total_after = Some(losses::disc_total(r, f));
        }
        Ok(stats)
    }

    fn update_generator(&mut self, batch: &StepBatch, fwd: &GenForward<f32>) -> Result<GenStats> {
        let w = self.config.loss_weights;
        let b = self.config.batch_size;
        let Models {
            generator,
            discriminator,
            gen_opt,
            ..
        } = &mut self.models;
        generator.store_mut().zero_grad();

        let (out, cache) = discriminator.forward(&fwd.images, Mode::Eval)?;
        let target = batch.target_affects.data();
        let gen_adv = losses::gen_adv_loss(&f64s(&out.validity), &f64s(out.class_probs.data()), &f64s(target))?;
        let alpha = w.alpha as f32;
        let ones = vec![1.0f32; b];
        let dv: Vec<f32> = losses::bce_logit_grad(&ones, &out.validity).iter().map(|g| g * alpha).collect();
        let dc: Vec<f32> = losses::cce_logit_grad(target, out.class_probs.data())
            .iter()
            .map(|g| g * alpha)
            .collect();
        let mut d_images = discriminator
            .backward(&cache, &dv, &dc, GradFlags { params: false, input: true })
            .expect("image gradient requested");

        let reconst = losses::reconst_loss(&f64s(fwd.images.data()), &f64s(batch.target_images.data()))?;
        let gamma = w.gamma as f32;
        for (d, g) in d_images
            .data_mut()
            .iter_mut()
            .zip(losses::reconst_grad(fwd.images.data(), batch.target_images.data()))
        {
            *d += gamma * g;
        }

        let latent = self.config.latent_dim;
        let (mu, lv) = (fwd.dist.mu.data(), fwd.dist.log_var.data());
        let kl = losses::kl_loss(&f64s(mu), &f64s(lv), latent)?;
        let (dmu, dlv) = losses::kl_grad(mu, lv, latent);
        let beta = w.beta as f32;
        let dmu: Vec<f32> = dmu.iter().map(|g| g * beta).collect();
        let dlv: Vec<f32> = dlv.iter().map(|g| g * beta).collect();

        generator.backward(fwd, &d_images, &dmu, &dlv);
        gen_opt.step(generator.store_mut());
        Ok(GenStats { gen_adv, reconst, kl })
    }

    pub fn train_step(&mut self) -> Result<TrainMetrics> {
        self.train_step_observed(|_, _| {})
    }

    /// [`Trainer::train_step`] with a hook called at each [`StepPhase`].
    pub fn train_step_observed(&mut self, mut observe: impl FnMut(StepPhase, &Models)) -> Result<TrainMetrics> {
        let start = Instant::now();
        let batch = self.draw_batch()?;
        let fwd = self.models.generator.forward_train(
            &batch.source_images,
            &batch.source_affects,
            &batch.target_affects,
            &batch.epsilon,
        )?;
        observe(StepPhase::BeforeDiscriminator, &self.models);
        let d = self.update_discriminator(&batch, &fwd.images)?;
        observe(StepPhase::BeforeGenerator, &self.models);
        let g = self.update_generator(&batch, &fwd)?;
        observe(StepPhase::Done, &self.models);
        self.state.step += 1;

        let w = self.config.loss_weights;
        let losses = LossReport {
            gen_adv: g.gen_adv,
            reconst: g.reconst,
            kl: g.kl,
            gen_total: losses::gen_total(g.gen_adv, g.kl, g.reconst, &w)?,
            disc_real: d.disc_real,
            disc_fake: d.disc_fake,
            disc_total: losses::disc_total(d.disc_real, d.disc_fake),
        };
        Ok(TrainMetrics {
            step: self.state.step,
            losses,
            disc_total_after: d.disc_total_after,
            real_binary_acc: d.real_binary_acc,
            fake_binary_acc: d.fake_binary_acc,
            real_class_acc: d.real_class_acc,
            fake_class_acc: d.fake_class_acc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Steps until `config.total_steps`, logging every row to `log` and
    /// saving a checkpoint every `checkpoint_every` steps into `ckpt_dir`.
    pub fn run(
        &mut self,
        log: &mut MetricsLog,
        ckpt_dir: Option<&Path>,
        mut progress: impl FnMut(&TrainMetrics),
    ) -> Result<()> {
        while self.state.step < self.config.total_steps {
            let m = self.train_step()?;
            log.append(&m)?;
            progress(&m);
            let every = self.config.checkpoint_every;
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.state.step.is_multiple_of(every) {
                    let path = dir.join(format!("step_{:06}.ckpt", self.state.step));
                    save_checkpoint(&self.config, &self.models, &self.state, &path)?;
                }
            }
        }
        Ok(())
    }
}

/// File names inside `output_dir`.
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Full run: loads the corpus, trains (optionally from `resume`), writes
/// `metrics.csv`, periodic checkpoints and `final.ckpt` under `output_dir`.
pub fn train(
    config: &TrainConfig,
    resume: Option<&Path>,
    progress: impl FnMut(&TrainMetrics),
) -> Result<Checkpoint> {
    config.validate()?;
    let data = TrainingData::load(config)?;
    let out = &config.output_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let trainer = Trainer::resume(config.clone(), data, load_checkpoint(path)?)?;
            let log = MetricsLog::resume(&metrics_path, trainer.state.step)?;
            (trainer, log)
        }
        None => (Trainer::new(config.clone(), data)?, MetricsLog::create(&metrics_path)?),
    };
    trainer.run(&mut log, Some(&ckpt_dir), progress)?;
    save_checkpoint(&trainer.config, &trainer.models, &trainer.state, &out.join(FINAL_CHECKPOINT))?;
    Ok(trainer.into_checkpoint())
}
