use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

/// One row of the metrics log.
///
/// CSV header, in order: `step, gen_adv, reconst, kl, gen_total, disc_real,
/// disc_fake, disc_total, disc_total_after, real_binary_acc, fake_binary_acc,
/// real_class_acc, fake_class_acc, wall_ms`. `disc_total_after` is the
/// discriminator loss on the same batch re-measured after its update, left
/// empty outside the probe window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    /// 1-based: the first update is step 1.
    pub step: u64,
    pub losses: LossReport,
    pub disc_total_after: Option<f64>,
    pub real_binary_acc: f64,
    pub fake_binary_acc: f64,
    pub real_class_acc: f64,
    pub fake_class_acc: f64,
    pub wall_ms: f64,
}

impl TrainMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &TrainMetrics) -> bool {
        TrainMetrics { wall_ms: 0.0, ..self.clone() } == TrainMetrics { wall_ms: 0.0, ..other.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    step: u64,
    gen_adv: f64,
    reconst: f64,
    kl: f64,
    gen_total: f64,
    disc_real: f64,
    disc_fake: f64,
    disc_total: f64,
    disc_total_after: Option<f64>,
    real_binary_acc: f64,
    fake_binary_acc: f64,
    real_class_acc: f64,
    fake_class_acc: f64,
    wall_ms: f64,
}

impl From<&TrainMetrics> for Row {
    fn from(m: &TrainMetrics) -> Self {
        let l = &m.losses;
        Row {
            step: m.step,
            gen_adv: l.gen_adv,
            reconst: l.reconst,
            kl: l.kl,
            gen_total: l.gen_total,
            disc_real: l.disc_real,
            disc_fake: l.disc_fake,
            disc_total: l.disc_total,
            disc_total_after: m.disc_total_after,
            real_binary_acc: m.real_binary_acc,
            fake_binary_acc: m.fake_binary_acc,
            real_class_acc: m.real_class_acc,
            fake_class_acc: m.fake_class_acc,
            wall_ms: m.wall_ms,
        }
    }
}

impl From<Row> for TrainMetrics {
    fn from(r: Row) -> Self {
        TrainMetrics {
            step: r.step,
            losses: LossReport {
                gen_adv: r.gen_adv,
                reconst: r.reconst,
                kl: r.kl,
                gen_total: r.gen_total,
                disc_real: r.disc_real,
                disc_fake: r.disc_fake,
                disc_total: r.disc_total,
            },
            disc_total_after: r.disc_total_after,
            real_binary_acc: r.real_binary_acc,
            fake_binary_acc: r.fake_binary_acc,
            real_class_acc: r.real_class_acc,
            fake_class_acc: r.fake_class_acc,
            wall_ms: r.wall_ms,
        }
    }
}

/// Append-only CSV log.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl MetricsLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        Ok(Self { path: path.to_owned(), writer })
    }

    /// Continues a log after `step`: rows beyond it (from an interrupted run)
    /// are dropped so the file stays strictly increasing.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<TrainMetrics> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|m| m.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for m in &kept {
            log.append(m)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, m: &TrainMetrics) -> Result<()> {
        self.writer.serialize(Row::from(m)).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>> {
    let file = OpenOptions::new().read(true).open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize::<Row>()
        .map(|r| r.map(TrainMetrics::from).map_err(|e| csv_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> TrainMetrics {
        TrainMetrics {
            step,
            losses: LossReport { gen_adv: 1.5, gen_total: 2.0, ..Default::default() },
            disc_total_after: step.is_multiple_of(2).then_some(0.25),
            real_binary_acc: 1.0,
            fake_binary_acc: 0.5,
            real_class_acc: 0.75,
            fake_class_acc: 0.125,
            wall_ms: 3.0,
        }
    }

    #[test]
    fn rows_round_trip_and_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut log = MetricsLog::create(&path).unwrap();
        for s in 1..=5 {
            log.append(&row(s)).unwrap();
        }
        drop(log);
        assert_eq!(read_metrics(&path).unwrap(), (1..=5).map(row).collect::<Vec<_>>());
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "step,gen_adv,reconst,kl,gen_total,disc_real,disc_fake,disc_total,disc_total_after,"
        ));

        let mut log = MetricsLog::resume(&path, 3).unwrap();
        log.append(&row(4)).unwrap();
        drop(log);
        let steps: Vec<u64> = read_metrics(&path).unwrap().iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }
}
