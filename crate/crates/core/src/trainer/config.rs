use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::affect::LambdaMode;
use crate::discriminator::DiscConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;

/// Layer widths. Defaults are the full-size networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub latent_branch: usize,
    pub affect_branch: usize,
    pub disc_channels: Vec<usize>,
    pub activation_slope: f64,
    pub log_var_clamp: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            encoder_channels: g.encoder_channels,
            decoder_channels: g.decoder_channels,
            latent_branch: g.latent_branch,
            affect_branch: g.affect_branch,
            disc_channels: DiscConfig::default().channels,
            activation_slope: g.activation_slope,
            log_var_clamp: g.log_var_clamp,
        }
    }
}

impl NetworkConfig {
    /// Networks sized for a CPU: generator base width 32 (the full schedule),
    /// discriminator 16/32/64. A discriminator as wide as the generator wins
    /// too early at desk scale and stalls reconstruction.
    pub fn desk(image_size: usize, latent_dim: usize) -> Self {
        let g = GeneratorConfig::scaled(image_size, latent_dim, 32);
        Self {
            encoder_channels: g.encoder_channels,
            decoder_channels: g.decoder_channels,
            latent_branch: g.latent_branch,
            affect_branch: g.affect_branch,
            disc_channels: vec![16, 32, 64],
            activation_slope: g.activation_slope,
            log_var_clamp: g.log_var_clamp,
        }
    }
}

/// Training configuration; the TOML form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::total_steps")]
    pub total_steps: u64,
    #[serde(default = "defaults::adam_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    pub corpus_root: PathBuf,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default = "defaults::one")]
    pub disc_steps_per_gen_step: u32,
    /// Steps (from 0) on which the discriminator loss is re-measured after
    /// its update, for the descent check.
    #[serde(default = "defaults::descent_probe_steps")]
    pub descent_probe_steps: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub network: NetworkConfig,
}

mod defaults {
    use std::path::PathBuf;

    pub fn learning_rate() -> f64 {
        2e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn total_steps() -> u64 {
        100_000
    }
    pub fn adam_betas() -> (f64, f64) {
        (0.5, 0.999)
    }
    pub fn image_size() -> usize {
        64
    }
    pub fn latent_dim() -> usize {
        128
    }
    pub fn checkpoint_every() -> u64 {
        1000
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
    pub fn val_fraction() -> f64 {
        0.3
    }
    pub fn noise_scale() -> f64 {
        0.1
    }
    pub fn one() -> u32 {
        1
    }
    pub fn descent_probe_steps() -> u64 {
        200
    }
}

impl TrainConfig {
    /// Full-size settings: 100K steps, batch 32, lr 2e-4.
    pub fn paper(corpus_root: impl Into<PathBuf>) -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            total_steps: defaults::total_steps(),
            adam_betas: defaults::adam_betas(),
            seed: 0,
            corpus_root: corpus_root.into(),
            image_size: defaults::image_size(),
            latent_dim: defaults::latent_dim(),
            checkpoint_every: defaults::checkpoint_every(),
            output_dir: defaults::output_dir(),
            val_fraction: defaults::val_fraction(),
            noise_scale: defaults::noise_scale(),
            lambda_mode: LambdaMode::default(),
            disc_steps_per_gen_step: 1,
            descent_probe_steps: defaults::descent_probe_steps(),
            loss_weights: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }

    /// 3,000 steps on narrow networks.
    pub fn desk(corpus_root: impl Into<PathBuf>) -> Self {
        let mut c = Self::paper(corpus_root);
        c.total_steps = 3000;
        c.checkpoint_every = 500;
        c.network = NetworkConfig::desk(c.image_size, c.latent_dim);
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            latent_dim: self.latent_dim,
            encoder_channels: self.network.encoder_channels.clone(),
            decoder_channels: self.network.decoder_channels.clone(),
            latent_branch: self.network.latent_branch,
            affect_branch: self.network.affect_branch,
            activation_slope: self.network.activation_slope,
            log_var_clamp: self.network.log_var_clamp,
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            image_size: self.image_size,
            channels: self.network.disc_channels.clone(),
            activation_slope: self.network.activation_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.total_steps < 1 {
            return bad("total_steps must be >= 1".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam_betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if self.disc_steps_per_gen_step == 0 {
            return bad("disc_steps_per_gen_step must be >= 1".into());
        }
        self.loss_weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.generator_config().validate()?;
        self.disc_config().validate()
    }
}
