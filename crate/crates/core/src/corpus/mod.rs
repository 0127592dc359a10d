//! Face corpus: procedural generation, on-disk layout, loading and splitting.
//!
//! Layout: `<root>/<identity_id>/<affect_name>/<NNNNN>.png` plus a
//! `manifest.tsv` at the root with one `identity\taffect\tframe\tpath` line
//! per image (no header). Anything following this layout can be loaded,
//! whether or not it was generated here.

mod preprocess;
mod render;

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use preprocess::{preprocess, to_rgb_image};
pub use render::{
    derive_seed, render_face, ExpressionParams, IdentityParams, Rect, Rendered, BROW_ANGLE_RANGE,
    BROW_THICKNESS_RANGE, CURVATURE_RANGE, EYE_SPACING_RANGE, FACE_ASPECT_RANGE, HUE_RANGE,
    OPENNESS_RANGE, SKIN_TONE_RANGE,
};

use crate::affect::AffectClass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRecord {
    pub identity_id: u32,
    pub affect: AffectClass,
    pub frame_index: u32,
    /// Relative to the corpus root, `/`-separated.
    pub path: String,
}

impl SampleRecord {
    pub fn new(identity_id: u32, affect: AffectClass, frame_index: u32) -> Self {
        Self {
            identity_id,
            affect,
            frame_index,
            path: format!("{identity_id}/{}/{frame_index:05}.png", affect.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_identities: u32,
    pub frames_per_pair: u32,
    pub image_size: u32,
    pub corpus_seed: u64,
}

impl CorpusSpec {
    pub const DESK: CorpusSpec = CorpusSpec {
        n_identities: 3,
        frames_per_pair: 200,
        image_size: 64,
        corpus_seed: 7,
    };

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 {
            return Err(Error::domain("corpus needs at least one identity"));
        }
        if self.frames_per_pair == 0 {
            return Err(Error::domain("corpus needs at least one frame per pair"));
        }
        if self.frames_per_pair > 99_999 {
            return Err(Error::domain("frame indices are limited to five digits"));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(Error::domain(format!(
                "image size {} must be a power of two >= 32",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn total_images(&self) -> u64 {
        self.n_identities as u64 * AffectClass::ALL.len() as u64 * self.frames_per_pair as u64
    }

    /// Records in canonical order: identity, then affect id, then frame.
    pub fn records(&self) -> Vec<SampleRecord> {
        let mut out = Vec::with_capacity(self.total_images() as usize);
        for id in 0..self.n_identities {
            for affect in AffectClass::ALL {
                for frame in 0..self.frames_per_pair {
                    out.push(SampleRecord::new(id, affect, frame));
                }
            }
        }
        out
    }

    /// Seed for one frame; independent of generation order and worker count.
    pub fn jitter_seed(&self, record: &SampleRecord) -> u64 {
        derive_seed(&[
            self.corpus_seed,
            record.identity_id as u64,
            record.affect.id() as u64,
            record.frame_index as u64,
        ])
    }

    /// Expression parameters used for a frame.
    pub fn expression(&self, record: &SampleRecord) -> ExpressionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed(record) ^ 0xe4e5);
        ExpressionParams::jittered(record.affect, &mut rng)
    }
}

/// What a generation run produced.
#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub records: Vec<SampleRecord>,
    /// Expression parameters per record, same order.
    pub expressions: Vec<ExpressionParams>,
}

/// Renders every frame of `spec` under `root` and writes the manifest.
pub fn gen_corpus(spec: &CorpusSpec, root: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let records = spec.records();
    for id in 0..spec.n_identities {
        for affect in AffectClass::ALL {
            let dir = root.join(id.to_string()).join(affect.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let identities: Vec<IdentityParams> = (0..spec.n_identities)
        .map(|id| IdentityParams::derive(spec.corpus_seed, id))
        .collect();
    let expressions: Vec<ExpressionParams> = records
        .par_iter()
        .map(|rec| -> Result<ExpressionParams> {
            let expr = spec.expression(rec);
            let face = render_face(
                &identities[rec.identity_id as usize],
                &expr,
                spec.jitter_seed(rec),
                spec.image_size,
            )?;
            let path = root.join(&rec.path);
            face.image
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| Error::Image { path, source })?;
            Ok(expr)
        })
        .collect::<Result<_>>()?;
    write_manifest(root, &records)?;
    Ok(CorpusManifest { records, expressions })
}

pub fn write_manifest(root: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::with_capacity(records.len() * 32);
    for r in records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.identity_id,
            r.affect.name(),
            r.frame_index,
            r.path
        ));
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<SampleRecord>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::domain(format!("{}:{}: malformed manifest line", path.display(), n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, affect, frame, rel] = fields[..] else {
                return Err(bad());
            };
            Ok(SampleRecord {
                identity_id: id.parse().map_err(|_| bad())?,
                affect: affect.parse()?,
                frame_index: frame.parse().map_err(|_| bad())?,
                path: rel.to_string(),
            })
        })
        .collect()
}

fn sorted_dir(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_dir = entry.file_type().map_err(|e| Error::io(&path, e))?.is_dir();
        out.push((entry.file_name().to_string_lossy().into_owned(), path, is_dir));
    }
    out.sort();
    Ok(out)
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Walks a corpus directory. Records come back in canonical order.
///
/// Loose files at the root (such as the manifest) and non-PNG files inside
/// affect directories are ignored; every other deviation from the layout is
/// an error naming the offending path.
pub fn load_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (name, id_dir, is_dir) in sorted_dir(root)? {
        if !is_dir {
            continue;
        }
        let identity_id: u32 = name.parse().map_err(|_| {
            Error::domain(format!(
                "unexpected directory `{name}` at {}: expected a numeric identity id",
                id_dir.display()
            ))
        })?;
        for (affect_name, affect_dir, is_dir) in sorted_dir(&id_dir)? {
            if !is_dir {
                continue;
            }
            let affect: AffectClass = affect_name.parse().map_err(|_| {
                Error::domain(format!(
                    "unknown affect directory `{affect_name}` at {}",
                    affect_dir.display()
                ))
            })?;
            for (file, path, is_dir) in sorted_dir(&affect_dir)? {
                let Some(stem) = file.strip_suffix(".png") else { continue };
                if is_dir {
                    continue;
                }
                let frame_index: u32 = stem.parse().map_err(|_| {
                    Error::domain(format!("frame file {} is not <NNNNN>.png", path.display()))
                })?;
                let mut sig = [0u8; 8];
                fs::File::open(&path)
                    .and_then(|mut f| f.read_exact(&mut sig))
                    .map_err(|e| Error::io(&path, e))?;
                if sig != PNG_SIGNATURE {
                    return Err(Error::domain(format!("{} is not a PNG file", path.display())));
                }
                records.push(SampleRecord {
                    identity_id,
                    affect,
                    frame_index,
                    path: format!("{name}/{affect_name}/{file}"),
                });
            }
        }
    }
    records.sort();
    Ok(records)
}

/// Stratified split. Each (identity, affect) stratum is shuffled and gives
/// `floor(n·f)` items to validation; the leftover fractional parts are then
/// handed out largest-first (ties by stratum order) until the validation set
/// holds exactly `round(N·f)` records. Both outputs keep input order.
pub fn split(
    records: &[SampleRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::domain(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut strata: BTreeMap<(u32, AffectClass), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.identity_id, r.affect)).or_default().push(i);
    }
    let target = (records.len() as f64 * val_fraction).round() as usize;
    let mut quota: Vec<usize> = Vec::with_capacity(strata.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(strata.len());
    for (k, members) in strata.values().enumerate() {
        let exact = members.len() as f64 * val_fraction;
        quota.push(exact.floor() as usize);
        remainders.push((exact - exact.floor(), k));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &(_, k) in &remainders {
        if missing == 0 {
            break;
        }
        let size = strata.values().nth(k).map_or(0, Vec::len);
        if quota[k] < size {
            quota[k] += 1;
            missing -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; records.len()];
    for (members, &q) in strata.values().zip(&quota) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..q] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(is_val) {
        if v { val.push(r.clone()) } else { train.push(r.clone()) }
    }
    Ok((train, val))
}

/// Uniform draw among records of `identity_id` showing `affect`.
pub fn sample_target<'a>(
    records: &'a [SampleRecord],
    identity_id: u32,
    affect: AffectClass,
    rng: &mut impl Rng,
) -> Result<&'a SampleRecord> {
    let pool: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.identity_id == identity_id && r.affect == affect)
        .collect();
    if pool.is_empty() {
        return Err(no_match(identity_id, affect));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

fn no_match(identity_id: u32, affect: AffectClass) -> Error {
    Error::domain(format!("no record for identity {identity_id} with affect {affect}"))
}

/// Precomputed (identity, affect) pools for repeated target draws.
#[derive(Clone, Debug, Default)]
pub struct TargetIndex {
    pools: BTreeMap<(u32, AffectClass), Vec<usize>>,
}

impl TargetIndex {
    pub fn new(records: &[SampleRecord]) -> Self {
        let mut pools: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            pools.entry((r.identity_id, r.affect)).or_default().push(i);
        }
        Self { pools }
    }

    /// Same distribution as [`sample_target`], returning the record index.
    pub fn sample(&self, identity_id: u32, affect: AffectClass, rng: &mut impl Rng) -> Result<usize> {
        let pool = self
            .pools
            .get(&(identity_id, affect))
            .ok_or_else(|| no_match(identity_id, affect))?;
        Ok(pool[rng.random_range(0..pool.len())])
    }

    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.pools.keys().map(|k| k.0).collect();
        ids.dedup();
        ids
    }
}

/// Decoded, preprocessed images held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    /// `[N, 3, S, S]` in `[-1, 1]`.
    pub images: Tensor<f32>,
    pub image_size: u32,
}

impl Dataset {
    pub fn load(root: &Path, records: Vec<SampleRecord>, image_size: u32) -> Result<Self> {
        let slices: Vec<Vec<f32>> = records
            .par_iter()
            .map(|r| {
                let path = root.join(&r.path);
                let img = image::open(&path)
                    .map_err(|source| Error::Image { path: path.clone(), source })?
                    .to_rgb8();
                Ok(preprocess(&img, image_size)?.into_data())
            })
            .collect::<Result<_>>()?;
        let s = image_size as usize;
        let images = Tensor::from_vec(&[records.len(), 3, s, s], slices.concat())?;
        Ok(Self {
            records,
            images,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = 3 * (self.image_size as usize).pow(2);
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Stacks the selected images into `[idx.len(), 3, S, S]`.
    pub fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let s = self.image_size as usize;
        let mut data = Vec::with_capacity(idx.len() * 3 * s * s);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[idx.len(), 3, s, s], data).expect("gather shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_identities: 2,
            frames_per_pair: 3,
            image_size: 32,
            corpus_seed: 11,
        }
    }

    #[test]
    fn counts_follow_the_formula() {
        assert_eq!(CorpusSpec::DESK.total_images(), 4200);
        let paper = CorpusSpec {
            n_identities: 10,
            frames_per_pair: 2300,
            image_size: 512,
            corpus_seed: 0,
        };
        assert_eq!(paper.total_images(), 161_000);
        let one = CorpusSpec { n_identities: 1, frames_per_pair: 1, ..small() };
        assert_eq!(one.records().len(), 7);
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec { image_size: 48, ..small() }.validate().is_err());
        assert!(CorpusSpec { image_size: 16, ..small() }.validate().is_err());
        assert!(CorpusSpec { n_identities: 0, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn generation_round_trips_through_loader_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(&small(), dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 42);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, manifest.records);
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest.records);
        let ds = Dataset::load(dir.path(), loaded, 32).unwrap();
        assert_eq!(ds.images.shape(), &[42, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_root_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn stray_directory_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        gen_corpus(&CorpusSpec { n_identities: 1, frames_per_pair: 1, ..small() }, dir.path()).unwrap();
        fs::create_dir(dir.path().join("happy")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("happy"), "{err}");
        fs::remove_dir(dir.path().join("happy")).unwrap();
        fs::create_dir(dir.path().join("0").join("happy")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("happy"), "{err}");
    }

    #[test]
    fn unreadable_frame_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        gen_corpus(&CorpusSpec { n_identities: 1, frames_per_pair: 1, ..small() }, dir.path()).unwrap();
        fs::write(dir.path().join("0/joy/00000.png"), b"junk").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00000.png"), "{err}");
    }

    fn fake_records(ids: u32, per_pair: u32) -> Vec<SampleRecord> {
        CorpusSpec { n_identities: ids, frames_per_pair: per_pair, ..small() }.records()
    }

    #[test]
    fn split_counts_match_arithmetic() {
        let (t, v) = split(&fake_records(3, 200), 0.3, 1).unwrap();
        assert_eq!((t.len(), v.len()), (2940, 1260));
        // paper-scale shape: 162K total at 70/30
        let many: Vec<SampleRecord> = (0..162_000u32)
            .map(|i| SampleRecord::new(i % 10, AffectClass::ALL[(i / 10 % 7) as usize], i))
            .collect();
        let (t, v) = split(&many, 0.3, 1).unwrap();
        assert_eq!((t.len(), v.len()), (113_400, 48_600));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let recs = fake_records(3, 200);
        let (t1, v1) = split(&recs, 0.3, 9).unwrap();
        let (t2, v2) = split(&recs, 0.3, 9).unwrap();
        assert_eq!((&t1, &v1), (&t2, &v2));
        for id in 0..3 {
            for a in AffectClass::ALL {
                let n = v1.iter().filter(|r| r.identity_id == id && r.affect == a).count();
                assert_eq!(n, 60);
            }
        }
        let (_, v3) = split(&recs, 0.3, 10).unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let recs = fake_records(1, 2);
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(split(&recs, f, 0).is_err());
        }
    }

    #[test]
    fn sample_target_filters_and_is_uniform() {
        let recs = fake_records(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = sample_target(&recs, 2, AffectClass::Joy, &mut rng).unwrap();
        assert_eq!((r.identity_id, r.affect), (2, AffectClass::Joy));
        assert!(sample_target(&recs, 9, AffectClass::Joy, &mut rng).is_err());

        let one = fake_records(1, 1);
        for _ in 0..5 {
            assert_eq!(sample_target(&one, 0, AffectClass::Fear, &mut rng).unwrap().frame_index, 0);
        }

        let mut hist = [0usize; 10];
        for _ in 0..1000 {
            hist[sample_target(&recs, 1, AffectClass::Anger, &mut rng).unwrap().frame_index as usize] += 1;
        }
        for (i, &h) in hist.iter().enumerate() {
            let f = h as f64 / 1000.0;
            assert!((f - 0.1).abs() <= 0.04, "record {i} frequency {f}");
        }
    }

    #[test]
    fn target_index_agrees_with_filter() {
        let recs = fake_records(2, 4);
        let idx = TargetIndex::new(&recs);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let i = idx.sample(1, AffectClass::Sadness, &mut rng).unwrap();
            assert_eq!((recs[i].identity_id, recs[i].affect), (1, AffectClass::Sadness));
        }
        assert_eq!(idx.identities(), vec![0, 1]);
    }
}
