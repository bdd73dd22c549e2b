use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc,wall_s";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_s: f64,
    /// Sample passes dropped for divergence during the epoch (not written to CSV).
    pub train_diverged: usize,
    pub test_diverged: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::Config(format!(
                    "epoch {} logged after epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_test_acc(&self) -> f64 {
        self.records.iter().map(|r| r.test_acc).fold(0.0, f64::max)
    }

    pub fn total_train_diverged(&self) -> usize {
        self.records.iter().map(|r| r.train_diverged).sum()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc, r.wall_s
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut log = Self::default();
        let mut offset = 0;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let here = offset;
            offset += line.len() + 1;
            if n == 0 {
                if line.trim() != METRICS_HEADER {
                    return Err(Error::Parse {
                        offset: here,
                        message: format!("expected header '{METRICS_HEADER}'"),
                    });
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse {
                offset: here,
                message: format!("line {}: malformed metrics row", n + 1),
            };
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            log.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                test_loss: num(3)?,
                test_acc: num(4)?,
                wall_s: num(5)?,
                train_diverged: 0,
                test_diverged: 0,
            })?;
        }
        Ok(log)
    }
}
