//! Affect classes and the 7-dimensional conditioning vectors built from them.
//!
//! | id | name     |
//! |----|----------|
//! | 0  | neutral  |
//! | 1  | joy      |
//! | 2  | sadness  |
//! | 3  | anger    |
//! | 4  | disgust  |
//! | 5  | fear     |
//! | 6  | surprise |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_AFFECTS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffectClass {
    Neutral = 0,
    Joy = 1,
    Sadness = 2,
    Anger = 3,
    Disgust = 4,
    Fear = 5,
    Surprise = 6,
}

impl AffectClass {
    pub const ALL: [AffectClass; NUM_AFFECTS] = [
        AffectClass::Neutral,
        AffectClass::Joy,
        AffectClass::Sadness,
        AffectClass::Anger,
        AffectClass::Disgust,
        AffectClass::Fear,
        AffectClass::Surprise,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::domain(format!("affect id {id} out of range 0..{NUM_AFFECTS}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AffectClass::Neutral => "neutral",
            AffectClass::Joy => "joy",
            AffectClass::Sadness => "sadness",
            AffectClass::Anger => "anger",
            AffectClass::Disgust => "disgust",
            AffectClass::Fear => "fear",
            AffectClass::Surprise => "surprise",
        }
    }
}

impl fmt::Display for AffectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AffectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown affect name `{s}`")))
    }
}

/// Conditioning vector fed to the encoder (source) or decoder (target).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectVector(pub [f64; NUM_AFFECTS]);

impl AffectVector {
    pub fn new(values: [f64; NUM_AFFECTS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("affect vector has non-finite entries: {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; NUM_AFFECTS] {
        &self.0
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

/// How the noise λ perturbs a target vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One scalar λ scales the active entries: `w·(1 + s·λ)`.
    #[default]
    ActiveEntry,
    /// An independent λ per entry added to every entry: `onehot + s·λ_i`.
    PerEntry,
}

pub fn one_hot(class: AffectClass) -> AffectVector {
    let mut v = [0.0; NUM_AFFECTS];
    v[class.id()] = 1.0;
    AffectVector(v)
}

/// Intensity-modulated target: the active entry becomes `1 + noise_scale·λ`.
pub fn modulate(class: AffectClass, lambda: f64, noise_scale: f64) -> Result<AffectVector> {
    check_noise_scale(noise_scale)?;
    let mut v = [0.0; NUM_AFFECTS];
    v[class.id()] = 1.0 + noise_scale * lambda;
    AffectVector::new(v)
}

/// Per-entry variant of [`modulate`], used under [`LambdaMode::PerEntry`].
pub fn modulate_per_entry(
    class: AffectClass,
    lambdas: &[f64; NUM_AFFECTS],
    noise_scale: f64,
) -> Result<AffectVector> {
    check_noise_scale(noise_scale)?;
    let mut v = one_hot(class).0;
    for (e, l) in v.iter_mut().zip(lambdas) {
        *e += noise_scale * l;
    }
    AffectVector::new(v)
}

fn check_noise_scale(s: f64) -> Result<()> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::domain(format!("noise scale must be finite and >= 0, got {s}")));
    }
    Ok(())
}

/// Weighted mixture of affects used as a hybrid target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSpec {
    pub weights: BTreeMap<AffectClass, f64>,
    pub noise_scale: f64,
    pub lambda: f64,
}

impl BlendSpec {
    pub fn new(weights: impl IntoIterator<Item = (AffectClass, f64)>, lambda: f64) -> Self {
        Self {
            weights: weights.into_iter().collect(),
            noise_scale: 0.1,
            lambda,
        }
    }

    /// Even two-way mix, λ = 0.
    pub fn pair(a: AffectClass, b: AffectClass) -> Self {
        Self::new([(a, 0.5), (b, 0.5)], 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_noise_scale(self.noise_scale)?;
        if !self.lambda.is_finite() {
            return Err(Error::domain("blend lambda must be finite"));
        }
        if let Some((c, w)) = self.weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::domain(format!("blend weight for {c} is not finite: {w}")));
        }
        if self.weights.values().all(|&w| w == 0.0) {
            return Err(Error::domain("blend needs at least one nonzero weight"));
        }
        Ok(())
    }
}

/// The three mixed expressions shown in the hybrid grid by default.
pub fn default_hybrids() -> Vec<BlendSpec> {
    use AffectClass::*;
    vec![
        BlendSpec::pair(Anger, Sadness),
        BlendSpec::pair(Joy, Disgust),
        BlendSpec::pair(Fear, Surprise),
    ]
}

/// Each weighted entry becomes `weight·(1 + noise_scale·λ)`.
pub fn blend(spec: &BlendSpec) -> Result<AffectVector> {
    spec.validate()?;
    let scale = 1.0 + spec.noise_scale * spec.lambda;
    let mut v = [0.0; NUM_AFFECTS];
    for (&class, &w) in &spec.weights {
        v[class.id()] = w * scale;
    }
    AffectVector::new(v)
}

/// Most probable class; ties go to the lowest id.
pub fn argmax_class(probs: &[f64]) -> Result<AffectClass> {
    if probs.len() != NUM_AFFECTS {
        return Err(Error::shape("argmax_class", NUM_AFFECTS, probs.len()));
    }
    let sum: f64 = probs.iter().sum();
    if sum.is_nan() || (sum - 1.0).abs() > 1e-5 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::domain(format!("class probabilities are not normalized (sum {sum})")));
    }
    Ok(AffectClass::ALL[argmax(probs)])
}

/// Index of the largest entry, lowest index on ties. No normalization check.
pub(crate) fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
