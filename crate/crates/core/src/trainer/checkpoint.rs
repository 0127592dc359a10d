//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FEXM" | version u32 | config_len u32 | config (UTF-8 TOML)
//! record*: name_len u32 | name | dtype u8 | rank u32 | dims u64*rank | data
//! crc64 (ECMA-182) of every preceding byte
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64. Records are written in a fixed
//! order so save→load→save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{Models, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FEXM";
pub const FORMAT_VERSION: u32 = 1;

const CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);
const TAG_U64: u8 = 2;

pub struct Checkpoint {
    pub config: TrainConfig,
    pub models: Models,
    pub state: TrainState,
}

enum Payload {
    F32(Tensor<f32>),
    U64(Vec<u64>),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn header(&mut self, name: &str, tag: u8, dims: &[usize]) {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(tag);
        self.u32(dims.len() as u32);
        for &d in dims {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }

    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.header(name, f32::DTYPE_TAG, t.shape());
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }

    fn words(&mut self, name: &str, v: &[u64]) {
        self.header(name, TAG_U64, &[v.len()]);
        for w in v {
            self.buf.extend_from_slice(&w.to_le_bytes());
        }
    }

    fn store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in store.entries() {
            self.tensor(&format!("{prefix}/{}", e.name), &e.value);
        }
    }

    fn adam(&mut self, prefix: &str, opt: &Adam<f32>, store: &ParamStore<f32>) {
        self.words(&format!("{prefix}/t"), &[opt.t]);
        for ((e, m), v) in store.entries().iter().zip(&opt.m).zip(&opt.v) {
            self.tensor(&format!("{prefix}/m/{}", e.name), m);
            self.tensor(&format!("{prefix}/v/{}", e.name), v);
        }
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut w: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let pos = rng.get_word_pos();
    w.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    w
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if w.len() != 7 {
        return Err(Error::Integrity(format!("rng state has {} words, expected 7", w.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | (w[6] as u128) << 64);
    Ok(rng)
}

pub fn to_bytes(config: &TrainConfig, models: &Models, state: &TrainState) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let cfg = config.to_toml();
    w.u32(cfg.len() as u32);
    w.buf.extend_from_slice(cfg.as_bytes());
    w.store("generator", models.generator.store());
    w.store("discriminator", models.discriminator.store());
    w.adam("generator_opt", &models.gen_opt, models.generator.store());
    w.adam("discriminator_opt", &models.disc_opt, models.discriminator.store());
    w.words("state/step", &[state.step]);
    w.words("state/rng", &rng_words(&state.rng));
    let crc = CRC.checksum(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("record overruns the file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Payload)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Integrity("record name is not UTF-8".into()))?;
        let tag = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("{name}: dims overflow")))?;
        let payload = match tag {
            t if t == f32::DTYPE_TAG => {
                let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
                let data = bytes.chunks_exact(4).map(f32::read_le).collect();
                Payload::F32(Tensor::from_vec(&dims, data)?)
            }
            TAG_U64 => {
                let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
                Payload::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect())
            }
            other => return Err(Error::Integrity(format!("{name}: unsupported dtype tag {other}"))),
        };
        Ok((name, payload))
    }
}

struct Records(BTreeMap<String, Payload>);

impl Records {
    fn tensor(&mut self, name: &str, like: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self.0.remove(name) {
            Some(Payload::F32(t)) if t.shape() == like.shape() => Ok(t),
            Some(Payload::F32(t)) => Err(Error::Integrity(format!(
                "{name}: shape {:?}, model expects {:?}",
                t.shape(),
                like.shape()
            ))),
            Some(_) => Err(Error::Integrity(format!("{name}: wrong dtype"))),
            None => Err(Error::Integrity(format!("missing record {name}"))),
        }
    }

    fn words(&mut self, name: &str) -> Result<Vec<u64>> {
        match self.0.remove(name) {
            Some(Payload::U64(v)) => Ok(v),
            Some(_) => Err(Error::Integrity(format!("{name}: wrong dtype"))),
            None => Err(Error::Integrity(format!("missing record {name}"))),
        }
    }

    fn scalar(&mut self, name: &str) -> Result<u64> {
        match self.words(name)?[..] {
            [v] => Ok(v),
            _ => Err(Error::Integrity(format!("{name}: expected one value"))),
        }
    }

    fn store(&mut self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for e in store.entries_mut() {
            e.value = self.tensor(&format!("{prefix}/{}", e.name), &e.value)?;
        }
        Ok(())
    }

    fn adam(&mut self, prefix: &str, opt: &mut Adam<f32>, store: &ParamStore<f32>) -> Result<()> {
        opt.t = self.scalar(&format!("{prefix}/t"))?;
        for ((e, m), v) in store.entries().iter().zip(&mut opt.m).zip(&mut opt.v) {
            *m = self.tensor(&format!("{prefix}/m/{}", e.name), m)?;
            *v = self.tensor(&format!("{prefix}/v/{}", e.name), v)?;
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = CRC.checksum(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Integrity("config block is not UTF-8".into()))?;
    let config = TrainConfig::from_toml(text)?;
    let mut records = BTreeMap::new();
    while r.pos < body.len() {
        let (name, payload) = r.record()?;
        if records.insert(name.clone(), payload).is_some() {
            return Err(Error::Integrity(format!("duplicate record {name}")));
        }
    }
    let mut records = Records(records);

    let mut models = Models::new(&config)?;
    records.store("generator", models.generator.store_mut())?;
    records.store("discriminator", models.discriminator.store_mut())?;
    records.adam("generator_opt", &mut models.gen_opt, models.generator.store())?;
    records.adam("discriminator_opt", &mut models.disc_opt, models.discriminator.store())?;
    let state = TrainState {
        step: records.scalar("state/step")?,
        rng: rng_from_words(&records.words("state/rng")?)?,
    };
    if let Some(extra) = records.0.keys().next() {
        return Err(Error::Integrity(format!("unexpected record {extra}")));
    }
    Ok(Checkpoint { config, models, state })
}

pub fn save_checkpoint(config: &TrainConfig, models: &Models, state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(config, models, state);
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// CRC64 of a checkpoint file's contents, as stored in its trailer.
pub fn checksum(bytes: &[u8]) -> u64 {
    CRC.checksum(bytes)
}
