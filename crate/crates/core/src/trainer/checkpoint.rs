//! Binary checkpoints.
//!
//! Layout (little-endian): magic `OCDLCKPT`, `u32` version, `u64` model hash,
//! `u8` kind, `u64` epochs completed, then for each group `u`, `omega`,
//! `bias`: `u64` length and the values as `f64`; then the optimizer: `u8`
//! present flag and, if set, per group `u64` step count, `m` and `v`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optimizer::GroupOptimizer;

use super::config::{ExperimentKind, TrainConfig};
use super::model::{Parameters, Setup};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCDLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_hash: u64,
    pub kind: ExperimentKind,
    pub epochs_completed: u64,
    pub params: Parameters,
    /// Per-group `(step_count, m, v)`.
    pub optimizer: Option<Vec<(u64, Vec<f64>, Vec<f64>)>>,
}

fn kind_code(kind: ExperimentKind) -> u8 {
    match kind {
        ExperimentKind::OdeSpiral => 0,
        ExperimentKind::OeoSpiral => 1,
        ExperimentKind::OeoMnist => 2,
    }
}

fn write_array(w: &mut impl Write, values: &[f64]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: "truncated checkpoint".into(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Parse {
                offset: at,
                message: format!("{what} has {n} entries, configuration needs {expected}"),
            });
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        params: &Parameters,
        optimizer: Option<&GroupOptimizer>,
        epochs_completed: u64,
    ) -> Self {
        Self {
            model_hash: config.model_hash(),
            kind: config.kind,
            epochs_completed,
            params: params.clone(),
            optimizer: optimizer.map(|o| {
                o.states
                    .iter()
                    .map(|s| (s.step_count, s.m.clone(), s.v.clone()))
                    .collect()
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&self.model_hash.to_le_bytes())?;
        out.write_all(&[kind_code(self.kind)])?;
        out.write_all(&self.epochs_completed.to_le_bytes())?;
        for g in self.params.groups() {
            write_array(&mut out, g)?;
        }
        match &self.optimizer {
            None => out.write_all(&[0])?,
            Some(groups) => {
                out.write_all(&[1])?;
                for (steps, m, v) in groups {
                    out.write_all(&steps.to_le_bytes())?;
                    write_array(&mut out, m)?;
                    write_array(&mut out, v)?;
                }
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint written for `config`. Fails if the model hash,
    /// kind or any array length disagrees with the configuration.
    pub fn from_bytes(bytes: &[u8], config: &TrainConfig) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hash = r.u64()?;
        if hash != config.model_hash() {
            return Err(Error::Checkpoint(format!(
                "configuration hash mismatch: checkpoint {hash:016x}, configuration {:016x}",
                config.model_hash()
            )));
        }
        let kind = r.u8()?;
        if kind != kind_code(config.kind) {
            return Err(Error::Checkpoint(format!("checkpoint kind code {kind} does not match {}", config.kind)));
        }
        let epochs_completed = r.u64()?;
        let setup = Setup::new(config)?;
        let mut params = setup.init_parameters();
        let lens = params.group_lens();
        for ((g, &n), name) in params.groups_mut().into_iter().zip(&lens).zip(super::model::GROUP_NAMES) {
            g.copy_from_slice(&r.array(n, name)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut groups = Vec::new();
                for (&n, name) in lens.iter().zip(super::model::GROUP_NAMES) {
                    let steps = r.u64()?;
                    let m = r.array(n, name)?;
                    let v = r.array(n, name)?;
                    groups.push((steps, m, v));
                }
                Some(groups)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                message: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            model_hash: hash,
            kind: config.kind,
            epochs_completed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, config)
    }

    /// Restores optimizer moments into `opt`.
    pub fn restore_optimizer(&self, opt: &mut GroupOptimizer) -> Result<()> {
        let groups = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        for (state, (steps, m, v)) in opt.states.iter_mut().zip(groups) {
            state.step_count = *steps;
            state.m.clone_from(m);
            state.v.clone_from(v);
        }
        Ok(())
    }
}
