//! Evaluation protocols: discriminator accuracy table, sample grids
//! (random, transformation, hybrid) and a pairwise-distance diversity score.
//!
//! Scoring goes through the [`Translator`] and [`Judge`] traits so the
//! pipeline can be checked against stub models with known answers.

mod grid;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use grid::{tile, write_grid, GUTTER};

use crate::affect::{self, AffectClass, AffectVector, BlendSpec, NUM_AFFECTS};
use crate::corpus::{derive_seed, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{affect_batch, Generator, LatentVector, Noise};
use crate::tensor::Tensor;

/// Images are processed in chunks of this many to bound memory.
const CHUNK: usize = 64;

/// Image-to-image model under evaluation.
pub trait Translator {
    fn image_size(&self) -> usize;
    /// `images [n,3,S,S]`, `source`/`target` `[n,7]`; `epsilon` `[n,latent]` or
    /// `None` for the deterministic (`z = μ`) path.
    fn translate(
        &self,
        images: &Tensor<f32>,
        source: &Tensor<f32>,
        target: &Tensor<f32>,
        epsilon: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>>;
    fn latent_dim(&self) -> usize;
}

impl Translator for Generator<f32> {
    fn image_size(&self) -> usize {
        self.config().image_size
    }

    fn translate(
        &self,
        images: &Tensor<f32>,
        source: &Tensor<f32>,
        target: &Tensor<f32>,
        epsilon: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let noise = match epsilon {
            Some(e) => Noise::Sample(e.clone()),
            None => Noise::Deterministic,
        };
        self.generate(images, source, target, &noise)
    }

    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }
}

/// What is known about an image being judged. Real discriminators ignore it;
/// stubs may use it to produce known answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub real: bool,
    pub label: AffectClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub validity: f64,
    pub probs: [f64; NUM_AFFECTS],
}

pub trait Judge {
    fn judge(&self, images: &Tensor<f32>, items: &[EvalItem]) -> Result<Vec<Verdict>>;
}

impl Judge for Discriminator<f32> {
    fn judge(&self, images: &Tensor<f32>, _items: &[EvalItem]) -> Result<Vec<Verdict>> {
        let out = self.discriminate(images)?;
        Ok((0..out.len())
            .map(|i| Verdict {
                validity: out.validity[i] as f64,
                probs: std::array::from_fn(|k| out.probs_row(i)[k] as f64),
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    /// Fraction with validity on the correct side of 0.5.
    pub binary: f64,
    /// Fraction whose argmax class equals the label.
    pub multiclass: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    pub train_real: Accuracy,
    pub train_fake: Accuracy,
    pub val_real: Accuracy,
    pub val_fake: Accuracy,
}

impl AccuracyTable {
    pub fn entries(&self) -> [(&'static str, &'static str, Accuracy); 4] {
        [
            ("train", "real", self.train_real),
            ("train", "fake", self.train_fake),
            ("val", "real", self.val_real),
            ("val", "fake", self.val_fake),
        ]
    }

    /// CSV with header `split,kind,binary_accuracy,multiclass_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,kind,binary_accuracy,multiclass_accuracy\n");
        for (split, kind, a) in self.entries() {
            writeln!(s, "{split},{kind},{},{}", a.binary, a.multiclass).expect("string write");
        }
        s
    }
}

fn score(verdicts: &[Verdict], items: &[EvalItem]) -> Accuracy {
    let n = items.len() as f64;
    let binary = verdicts
        .iter()
        .zip(items)
        .filter(|(v, it)| if it.real { v.validity > 0.5 } else { v.validity < 0.5 })
        .count();
    let multi = verdicts
        .iter()
        .zip(items)
        .filter(|(v, it)| affect::argmax(&v.probs) == it.label.id())
        .count();
    Accuracy {
        binary: binary as f64 / n,
        multiclass: multi as f64 / n,
    }
}

/// Real and fake accuracy over one split. Every real image gets one fake
/// with a uniformly drawn one-hot target affect and sampled latent noise;
/// the fake is scored against that drawn class.
pub fn split_accuracy(
    generator: &impl Translator,
    judge: &impl Judge,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
) -> Result<(Accuracy, Accuracy)> {
    if indices.is_empty() {
        return Err(Error::domain("accuracy over an empty set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = generator.latent_dim();
    let (mut real_v, mut real_items) = (Vec::new(), Vec::new());
    let (mut fake_v, mut fake_items) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(CHUNK) {
        let n = chunk.len();
        let images = data.gather(chunk);
        let labels: Vec<AffectClass> = chunk.iter().map(|&i| data.records[i].affect).collect();
        let items: Vec<EvalItem> = labels.iter().map(|&label| EvalItem { real: true, label }).collect();
        real_v.extend(judge.judge(&images, &items)?);
        real_items.extend(items);

        let targets: Vec<AffectClass> = (0..n)
            .map(|_| AffectClass::ALL[rng.random_range(0..NUM_AFFECTS)])
            .collect();
        let eps: Vec<f32> = (0..n * latent).map(|_| rng.sample(StandardNormal)).collect();
        let source = affect_batch(&labels.iter().map(|&c| affect::one_hot(c)).collect::<Vec<_>>());
        let target = affect_batch(&targets.iter().map(|&c| affect::one_hot(c)).collect::<Vec<_>>());
        let fakes = generator.translate(&images, &source, &target, Some(&Tensor::from_vec(&[n, latent], eps)?))?;
        let items: Vec<EvalItem> = targets.iter().map(|&label| EvalItem { real: false, label }).collect();
        fake_v.extend(judge.judge(&fakes, &items)?);
        fake_items.extend(items);
    }
    Ok((score(&real_v, &real_items), score(&fake_v, &fake_items)))
}

pub fn accuracy_table(
    generator: &impl Translator,
    judge: &impl Judge,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    seed: u64,
) -> Result<AccuracyTable> {
    let (train_real, train_fake) = split_accuracy(generator, judge, data, train, derive_seed(&[seed, 0]))?;
    let (val_real, val_fake) = split_accuracy(generator, judge, data, val, derive_seed(&[seed, 1]))?;
    Ok(AccuracyTable {
        train_real,
        train_fake,
        val_real,
        val_fake,
    })
}

fn grid_shape(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

/// Decoded random samples and the affect used for each.
pub struct RandomSamples {
    pub images: Tensor<f32>,
    pub affects: Vec<AffectClass>,
    pub cell_seeds: Vec<u64>,
}

/// `n` images decoded from `z ~ N(0, I)` and a uniformly drawn one-hot
/// affect. Cell `i` depends only on `(seed, i)`.
pub fn random_samples(generator: &Generator<f32>, n: usize, seed: u64) -> Result<RandomSamples> {
    if n == 0 {
        return Err(Error::domain("random grid needs at least one cell"));
    }
    let latent = generator.config().latent_dim;
    let mut z = Vec::with_capacity(n * latent);
    let mut affects = Vec::with_capacity(n);
    let mut cell_seeds = Vec::with_capacity(n);
    for i in 0..n {
        let cell_seed = derive_seed(&[seed, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
        affects.push(AffectClass::ALL[rng.random_range(0..NUM_AFFECTS)]);
        z.extend((0..latent).map(|_| rng.sample::<f32, _>(StandardNormal)));
        cell_seeds.push(cell_seed);
    }
    let z = Tensor::from_vec(&[n, latent], z)?;
    let mut images = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let target = affect_batch(&affects[start..end].iter().map(|&c| affect::one_hot(c)).collect::<Vec<_>>());
        images.push(generator.decode(&LatentVector { z: z.slice_batch(start, end) }, &target)?);
    }
    Ok(RandomSamples {
        images: Tensor::concat_batch(&images.iter().collect::<Vec<_>>())?,
        affects,
        cell_seeds,
    })
}

/// Random-sample grid written to `out` (PNG plus `.tsv` sidecar listing
/// each cell's seed and affect).
pub fn random_grid(generator: &Generator<f32>, n: usize, seed: u64, out: &Path) -> Result<RandomSamples> {
    let samples = random_samples(generator, n, seed)?;
    let (rows, cols) = grid_shape(n);
    let fields: Vec<String> = samples
        .cell_seeds
        .iter()
        .zip(&samples.affects)
        .map(|(s, a)| format!("{s}\t{a}"))
        .collect();
    write_grid(&samples.images, rows, cols, "seed\taffect", &fields, out)?;
    Ok(samples)
}

/// A neutral image standing for one identity.
#[derive(Clone, Debug)]
pub struct NeutralSource {
    pub identity_id: u32,
    /// `[1, 3, S, S]`
    pub image: Tensor<f32>,
}

/// First neutral frame of each requested identity among `indices`.
pub fn neutral_sources(data: &Dataset, indices: &[usize], identities: &[u32]) -> Result<Vec<NeutralSource>> {
    identities
        .iter()
        .map(|&id| {
            let best = indices
                .iter()
                .copied()
                .filter(|&i| data.records[i].identity_id == id && data.records[i].affect == AffectClass::Neutral)
                .min_by_key(|&i| data.records[i].frame_index)
                .ok_or_else(|| Error::domain(format!("no neutral source image for identity {id}")))?;
            Ok(NeutralSource {
                identity_id: id,
                image: data.gather(&[best]),
            })
        })
        .collect()
}

/// Deterministic translations of each source to each target; row-major
/// `[sources × targets, 3, S, S]`.
pub fn translate_grid(
    generator: &impl Translator,
    sources: &[NeutralSource],
    targets: &[AffectVector],
) -> Result<Tensor<f32>> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::domain("grid needs at least one source and one target"));
    }
    let k = targets.len();
    let target = affect_batch(targets);
    let source = affect_batch(&vec![affect::one_hot(AffectClass::Neutral); k]);
    let mut rows = Vec::with_capacity(sources.len());
    for src in sources {
        let repeated: Vec<&Tensor<f32>> = vec![&src.image; k];
        rows.push(generator.translate(&Tensor::concat_batch(&repeated)?, &source, &target, None)?);
    }
    Tensor::concat_batch(&rows.iter().collect::<Vec<_>>())
}

/// Rows are identities, columns the seven affects.
pub fn transform_grid(generator: &impl Translator, sources: &[NeutralSource], out: &Path) -> Result<Tensor<f32>> {
    let targets: Vec<AffectVector> = AffectClass::ALL.iter().map(|&c| affect::one_hot(c)).collect();
    let cells = translate_grid(generator, sources, &targets)?;
    let fields: Vec<String> = sources
        .iter()
        .flat_map(|s| AffectClass::ALL.iter().map(move |a| format!("{}\t{a}", s.identity_id)))
        .collect();
    write_grid(&cells, sources.len(), NUM_AFFECTS, "identity\taffect", &fields, out)?;
    Ok(cells)
}

/// Rows are identities, columns the blend specs.
pub fn hybrid_grid(
    generator: &impl Translator,
    sources: &[NeutralSource],
    specs: &[BlendSpec],
    out: &Path,
) -> Result<Tensor<f32>> {
    if specs.is_empty() {
        return Err(Error::domain("hybrid grid needs at least one blend"));
    }
    let targets = specs.iter().map(affect::blend).collect::<Result<Vec<_>>>()?;
    let cells = translate_grid(generator, sources, &targets)?;
    let describe = |s: &BlendSpec| {
        let parts: Vec<String> = s.weights.iter().map(|(c, w)| format!("{c}:{w}")).collect();
        format!("{}\t{}", parts.join("+"), s.lambda)
    };
    let fields: Vec<String> = sources
        .iter()
        .flat_map(|src| specs.iter().map(move |s| format!("{}\t{}", src.identity_id, describe(s))))
        .collect();
    write_grid(&cells, sources.len(), specs.len(), "identity\tblend\tlambda", &fields, out)?;
    Ok(cells)
}

/// Fraction of cells whose judged argmax class equals the expected class.
pub fn affect_agreement(judge: &impl Judge, cells: &Tensor<f32>, expected: &[AffectClass]) -> Result<f64> {
    if cells.batch() != expected.len() || expected.is_empty() {
        return Err(Error::shape("agreement labels", cells.batch(), expected.len()));
    }
    let items: Vec<EvalItem> = expected.iter().map(|&label| EvalItem { real: false, label }).collect();
    let verdicts = judge.judge(cells, &items)?;
    Ok(score(&verdicts, &items).multiclass)
}

/// Column labels of a transform grid with `rows` identities.
pub fn transform_labels(rows: usize) -> Vec<AffectClass> {
    (0..rows).flat_map(|_| AffectClass::ALL).collect()
}

/// Mean over all pairs of the mean absolute element difference.
pub fn diversity_score(images: &Tensor<f32>) -> Result<f64> {
    let n = images.batch();
    if n < 2 {
        return Err(Error::domain(format!("diversity needs at least 2 images, got {n}")));
    }
    let per = images.len() / n;
    let rows: Vec<&[f32]> = images.data().chunks_exact(per).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs() as f64).sum();
            total += d / per as f64;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    /// Returns its input unchanged.
    struct Identity;

    impl Translator for Identity {
        fn image_size(&self) -> usize {
            8
        }
        fn translate(&self, images: &Tensor<f32>, _: &Tensor<f32>, _: &Tensor<f32>, _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
            Ok(images.clone())
        }
        fn latent_dim(&self) -> usize {
            2
        }
    }

    /// Knows the answer; `invert` flips every verdict.
    struct Oracle {
        invert: bool,
    }

    impl Judge for Oracle {
        fn judge(&self, _: &Tensor<f32>, items: &[EvalItem]) -> Result<Vec<Verdict>> {
            Ok(items
                .iter()
                .map(|it| {
                    let real = it.real != self.invert;
                    let class = if self.invert { (it.label.id() + 1) % NUM_AFFECTS } else { it.label.id() };
                    let mut probs = [0.0; NUM_AFFECTS];
                    probs[class] = 1.0;
                    Verdict {
                        validity: if real { 0.9 } else { 0.1 },
                        probs,
                    }
                })
                .collect())
        }
    }

    fn toy_dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| crate::corpus::SampleRecord::new(0, AffectClass::ALL[i % 7], i as u32))
            .collect();
        Dataset {
            records,
            images: Tensor::zeros(&[n, 3, 8, 8]),
            image_size: 8,
        }
    }

    #[test]
    fn oracle_stub_scores_perfectly_and_inverted_stub_scores_zero() {
        let data = toy_dataset(20);
        let idx: Vec<usize> = (0..20).collect();
        let t = accuracy_table(&Identity, &Oracle { invert: false }, &data, &idx, &idx, 1).unwrap();
        for (_, _, a) in t.entries() {
            assert_eq!(a, Accuracy { binary: 1.0, multiclass: 1.0 });
        }
        let t = accuracy_table(&Identity, &Oracle { invert: true }, &data, &idx, &idx, 1).unwrap();
        for (_, _, a) in t.entries() {
            assert_eq!(a, Accuracy { binary: 0.0, multiclass: 0.0 });
        }
        assert!(t.to_csv().starts_with("split,kind,binary_accuracy,multiclass_accuracy\ntrain,real,0,0\n"));
    }

    #[test]
    fn empty_split_is_an_error() {
        let data = toy_dataset(3);
        assert!(accuracy_table(&Identity, &Oracle { invert: false }, &data, &[], &[0], 1).is_err());
    }

    #[test]
    fn diversity_examples() {
        let same = Tensor::full(&[3, 3, 2, 2], 0.3f32);
        assert_eq!(diversity_score(&same).unwrap(), 0.0);
        let mut data = vec![1.0f32; 12];
        data.extend(vec![-1.0f32; 12]);
        assert_eq!(diversity_score(&Tensor::from_vec(&[2, 3, 2, 2], data).unwrap()).unwrap(), 2.0);
        assert!(diversity_score(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    fn tiny_generator() -> Generator<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Generator::new(GeneratorConfig::scaled(8, 4, 2), &mut rng).unwrap()
    }

    #[test]
    fn random_grid_is_deterministic_and_distinct() {
        let g = tiny_generator();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let samples = random_grid(&g, 64, 9, &a).unwrap();
        random_grid(&g, 64, 9, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let sidecar = std::fs::read_to_string(a.with_extension("tsv")).unwrap();
        assert_eq!(sidecar.lines().count(), 65);
        let per = samples.images.len() / 64;
        let cells: Vec<&[f32]> = samples.images.data().chunks_exact(per).collect();
        for i in 0..64 {
            for j in i + 1..64 {
                assert_ne!(cells[i], cells[j], "cells {i} and {j} identical");
            }
        }
        random_grid(&g, 1, 9, &dir.path().join("one.png")).unwrap();
        let one = image::open(dir.path().join("one.png")).unwrap();
        assert_eq!((one.width(), one.height()), (8, 8));
    }

    #[test]
    fn transform_and_hybrid_layouts() {
        let g = tiny_generator();
        let data = toy_dataset(14);
        let mut data3 = data.clone();
        for (i, r) in data3.records.iter_mut().enumerate() {
            r.identity_id = (i / 7) as u32;
        }
        let idx: Vec<usize> = (0..14).collect();
        let sources = neutral_sources(&data3, &idx, &[0, 1]).unwrap();
        let err = neutral_sources(&data3, &idx, &[0, 5]).unwrap_err().to_string();
        assert!(err.contains("identity 5"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let cells = transform_grid(&g, &sources, &dir.path().join("t.png")).unwrap();
        assert_eq!(cells.batch(), 14);
        let img = image::open(dir.path().join("t.png")).unwrap();
        assert_eq!((img.width(), img.height()), (7 * 8 + 6 * GUTTER, 2 * 8 + GUTTER));

        let hybrids = affect::default_hybrids();
        let cells = hybrid_grid(&g, &sources, &hybrids, &dir.path().join("h.png")).unwrap();
        assert_eq!(cells.batch(), 6);
        assert!(hybrid_grid(&g, &sources, &[], &dir.path().join("x.png")).is_err());

        // a (1.0, 0.0) blend reproduces the pure-affect column
        let pure = BlendSpec::new([(AffectClass::Anger, 1.0), (AffectClass::Sadness, 0.0)], 0.0);
        let h = hybrid_grid(&g, &sources, &[pure], &dir.path().join("p.png")).unwrap();
        let t = transform_grid(&g, &sources, &dir.path().join("t2.png")).unwrap();
        let per = h.len() / h.batch();
        for row in 0..2 {
            let col = AffectClass::Anger.id();
            assert_eq!(&h.data()[row * per..(row + 1) * per], &t.data()[(row * 7 + col) * per..(row * 7 + col + 1) * per]);
        }
    }
}
