//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `kind` is required and
//! selects the defaults; every other key overrides one default. Unknown keys,
//! and keys that do not apply to the selected kind, are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::TimeGrid;
use crate::ode::GradientMode;
use crate::oeo::OeoParams;
use crate::optimizer::{AdamHyper, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    OdeSpiral,
    OeoSpiral,
    OeoMnist,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [Self::OdeSpiral, Self::OeoSpiral, Self::OeoMnist];

    pub fn is_delay(self) -> bool {
        !matches!(self, Self::OdeSpiral)
    }

    pub fn n_classes(self) -> usize {
        match self {
            Self::OeoMnist => 10,
            _ => 2,
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode_spiral" => Ok(Self::OdeSpiral),
            "oeo_spiral" => Ok(Self::OeoSpiral),
            "oeo_mnist" => Ok(Self::OeoMnist),
            other => Err(Error::Config(format!(
                "unknown kind '{other}' (ode_spiral | oeo_spiral | oeo_mnist)"
            ))),
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::OdeSpiral => "ode_spiral",
            Self::OeoSpiral => "oeo_spiral",
            Self::OeoMnist => "oeo_mnist",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_mode: GradientMode,
    pub optimizer: OptimizerKind,
    pub alpha_u: f64,
    pub alpha_omega: f64,
    pub alpha_b: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    // ODE grid
    pub dt: f64,
    pub n_steps: usize,

    // delay model and grid
    pub beta: f64,
    pub tau_us: f64,
    pub tau_h_us: f64,
    pub tau_l_us: f64,
    pub m_tau: usize,
    pub t_over_tau: usize,
    pub divergence_bound: f64,

    // spiral data
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sd: f64,
    pub turns: f64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,

    // MNIST data
    pub mnist_dir: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,

    pub threads: usize,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Record elapsed seconds in the metrics; `false` writes 0 so that
    /// repeated runs produce byte-identical files.
    pub wall_clock: bool,
}

const COMMON_KEYS: &[&str] = &[
    "kind",
    "seed",
    "epochs",
    "batch_size",
    "gradient_mode",
    "optimizer",
    "alpha_u",
    "alpha_omega",
    "alpha_b",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "threads",
    "metrics_path",
    "checkpoint_path",
    "wall_clock",
];
const ODE_KEYS: &[&str] = &["dt", "n_steps"];
const DELAY_KEYS: &[&str] = &[
    "beta",
    "tau_us",
    "tau_h_us",
    "tau_l_us",
    "m_tau",
    "t_over_tau",
    "divergence_bound",
];
const SPIRAL_KEYS: &[&str] = &[
    "train_per_class",
    "test_per_class",
    "noise_sd",
    "turns",
    "train_csv",
    "test_csv",
];
const MNIST_KEYS: &[&str] = &["mnist_dir", "train_limit", "test_limit"];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl TrainConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let oeo = OeoParams::default();
        let mut c = Self {
            kind,
            seed: 1,
            epochs: 300,
            batch_size: 1000,
            gradient_mode: GradientMode::Continuous,
            optimizer: OptimizerKind::Adam,
            alpha_u: 1e-2,
            alpha_omega: 1e-2,
            alpha_b: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            dt: 0.01,
            n_steps: 200,
            beta: oeo.beta,
            tau_us: oeo.tau,
            tau_h_us: oeo.tau_h,
            tau_l_us: oeo.tau_l,
            m_tau: 3286,
            t_over_tau: 5,
            divergence_bound: crate::delay::DEFAULT_DIVERGENCE_BOUND,
            train_per_class: 500,
            test_per_class: 500,
            noise_sd: 0.025,
            turns: 1.5,
            train_csv: None,
            test_csv: None,
            mnist_dir: None,
            train_limit: 10_000,
            test_limit: 2_000,
            threads: 0,
            metrics_path: None,
            checkpoint_path: None,
            wall_clock: true,
        };
        match kind {
            ExperimentKind::OdeSpiral => {
                c.alpha_u = 0.5;
                c.alpha_omega = 0.5;
                c.alpha_b = 0.5;
            }
            ExperimentKind::OeoSpiral => c.epochs = 100,
            ExperimentKind::OeoMnist => {
                c.epochs = 50;
                c.batch_size = 100;
                c.alpha_u = 1e-3;
                c.alpha_omega = 1e-3;
                c.alpha_b = 1e-3;
                c.tau_us = 1610.0;
                c.m_tau = 23_000;
                c.t_over_tau = 3;
            }
        }
        c
    }

    pub fn allowed_keys(kind: ExperimentKind) -> Vec<&'static str> {
        let mut keys = COMMON_KEYS.to_vec();
        match kind {
            ExperimentKind::OdeSpiral => {
                keys.extend(ODE_KEYS);
                keys.extend(SPIRAL_KEYS);
            }
            ExperimentKind::OeoSpiral => {
                keys.extend(DELAY_KEYS);
                keys.extend(SPIRAL_KEYS);
            }
            ExperimentKind::OeoMnist => {
                keys.extend(DELAY_KEYS);
                keys.extend(MNIST_KEYS);
            }
        }
        keys
    }

    /// Sets one key. Used by the file parser and by sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let all_known = COMMON_KEYS
            .iter()
            .chain(ODE_KEYS)
            .chain(DELAY_KEYS)
            .chain(SPIRAL_KEYS)
            .chain(MNIST_KEYS)
            .any(|k| *k == key);
        if !all_known {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        if !Self::allowed_keys(self.kind).contains(&key) {
            return Err(Error::Config(format!(
                "key '{key}' does not apply to kind {}",
                self.kind
            )));
        }
        match key {
            "kind" => {
                let kind: ExperimentKind = value.parse()?;
                if kind != self.kind {
                    return Err(Error::Config("kind cannot be changed after it is set".into()));
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "gradient_mode" => self.gradient_mode = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "alpha_u" => self.alpha_u = parse_num(key, value)?,
            "alpha_omega" => self.alpha_omega = parse_num(key, value)?,
            "alpha_b" => self.alpha_b = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_num(key, value)?,
            "dt" => self.dt = parse_num(key, value)?,
            "n_steps" => self.n_steps = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "tau_us" => self.tau_us = parse_num(key, value)?,
            "tau_h_us" => self.tau_h_us = parse_num(key, value)?,
            "tau_l_us" => self.tau_l_us = parse_num(key, value)?,
            "m_tau" => self.m_tau = parse_num(key, value)?,
            "t_over_tau" => self.t_over_tau = parse_num(key, value)?,
            "divergence_bound" => self.divergence_bound = parse_num(key, value)?,
            "train_per_class" => self.train_per_class = parse_num(key, value)?,
            "test_per_class" => self.test_per_class = parse_num(key, value)?,
            "noise_sd" => self.noise_sd = parse_num(key, value)?,
            "turns" => self.turns = parse_num(key, value)?,
            "train_csv" => self.train_csv = opt_path(value),
            "test_csv" => self.test_csv = opt_path(value),
            "mnist_dir" => self.mnist_dir = opt_path(value),
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "test_limit" => self.test_limit = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "metrics_path" => self.metrics_path = opt_path(value),
            "checkpoint_path" => self.checkpoint_path = opt_path(value),
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            _ => unreachable!("key list and match arms out of sync: {key}"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (n, raw) in text.lines().enumerate() {
            let here = offset;
            offset += raw.len() + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                offset: here,
                message: format!("line {}: expected 'key = value'", n + 1),
            })?;
            let k = k.trim();
            if entries.iter().any(|(prev, _, _): &(&str, &str, usize)| *prev == k) {
                return Err(Error::Parse {
                    offset: here,
                    message: format!("line {}: duplicate key '{k}'", n + 1),
                });
            }
            entries.push((k, v.trim(), n + 1));
        }
        let kind = entries
            .iter()
            .find(|(k, _, _)| *k == "kind")
            .ok_or_else(|| Error::Config("missing required key 'kind'".into()))?
            .1
            .parse()?;
        let mut config = Self::defaults(kind);
        for (k, v, line) in entries {
            config
                .set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::allowed_keys(self.kind) {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "kind" => self.kind.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "gradient_mode" => self.gradient_mode.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "alpha_u" => format!("{:?}", self.alpha_u),
            "alpha_omega" => format!("{:?}", self.alpha_omega),
            "alpha_b" => format!("{:?}", self.alpha_b),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_epsilon" => format!("{:?}", self.adam_epsilon),
            "dt" => format!("{:?}", self.dt),
            "n_steps" => self.n_steps.to_string(),
            "beta" => format!("{:?}", self.beta),
            "tau_us" => format!("{:?}", self.tau_us),
            "tau_h_us" => format!("{:?}", self.tau_h_us),
            "tau_l_us" => format!("{:?}", self.tau_l_us),
            "m_tau" => self.m_tau.to_string(),
            "t_over_tau" => self.t_over_tau.to_string(),
            "divergence_bound" => format!("{:?}", self.divergence_bound),
            "train_per_class" => self.train_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "noise_sd" => format!("{:?}", self.noise_sd),
            "turns" => format!("{:?}", self.turns),
            "train_csv" => path(&self.train_csv),
            "test_csv" => path(&self.test_csv),
            "mnist_dir" => path(&self.mnist_dir),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "threads" => self.threads.to_string(),
            "metrics_path" => path(&self.metrics_path),
            "checkpoint_path" => path(&self.checkpoint_path),
            "wall_clock" => self.wall_clock.to_string(),
            _ => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, a) in [
            ("alpha_u", self.alpha_u),
            ("alpha_omega", self.alpha_omega),
            ("alpha_b", self.alpha_b),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {a}"));
            }
        }
        self.adam_hyper(self.alpha_u).validate()?;
        if self.kind.is_delay() {
            self.oeo_params().validate()?;
            if !(self.divergence_bound > 0.0) {
                return fail(format!("divergence_bound must be positive, got {}", self.divergence_bound));
            }
            if self.kind == ExperimentKind::OeoSpiral && !self.m_tau.is_multiple_of(2) {
                return fail(format!("spiral encoding needs an even m_tau, got {}", self.m_tau));
            }
        }
        self.grid()?;
        if self.kind != ExperimentKind::OeoMnist {
            if self.train_csv.is_none() && self.batch_size > 2 * self.train_per_class {
                return fail(format!(
                    "batch_size {} exceeds the training set size {}",
                    self.batch_size,
                    2 * self.train_per_class
                ));
            }
            if (self.train_csv.is_none() && self.train_per_class == 0)
                || (self.test_csv.is_none() && self.test_per_class == 0)
            {
                return fail("spiral sets need at least one sample per class".into());
            }
        } else if self.batch_size > self.train_limit {
            return fail(format!(
                "batch_size {} exceeds train_limit {}",
                self.batch_size, self.train_limit
            ));
        }
        for p in [&self.metrics_path, &self.checkpoint_path].into_iter().flatten() {
            check_writable(p)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        if self.kind.is_delay() {
            TimeGrid::delay_aligned(self.tau_us, self.m_tau, self.t_over_tau)
        } else {
            TimeGrid::new(0.0, self.dt, self.n_steps, None)
        }
    }

    pub fn oeo_params(&self) -> OeoParams {
        OeoParams {
            tau_h: self.tau_h_us,
            tau_l: self.tau_l_us,
            tau: self.tau_us,
            beta: self.beta,
        }
    }

    pub fn adam_hyper(&self, alpha: f64) -> AdamHyper {
        AdamHyper {
            alpha,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Hash of the keys that fix the model and parameter shapes.
    pub fn model_hash(&self) -> u64 {
        let keys: &[&str] = if self.kind.is_delay() {
            &["kind", "beta", "tau_us", "tau_h_us", "tau_l_us", "m_tau", "t_over_tau"]
        } else {
            &["kind", "dt", "n_steps"]
        };
        let mut h = Sha256::new();
        for k in keys {
            h.update(format!("{k}={}\n", self.value_of(k)).as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// A small instance of `kind` for gradient checks: `n_steps` total steps
    /// (two delay intervals for the delay kinds).
    pub fn small_instance(kind: ExperimentKind, n_steps: usize) -> Result<Self> {
        let mut c = Self::defaults(kind);
        if kind.is_delay() {
            if n_steps < 4 || !n_steps.is_multiple_of(4) {
                return Err(Error::Config(format!(
                    "delay gradient checks need n_steps divisible by 4, got {n_steps}"
                )));
            }
            c.t_over_tau = 2;
            c.m_tau = n_steps / 2;
            // keep dt well below the fast time constant
            c.tau_us = 0.5 * c.m_tau as f64;
        } else {
            c.n_steps = n_steps;
        }
        c.grid()?;
        Ok(c)
    }
}

fn check_writable(path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let meta = std::fs::metadata(dir)
        .map_err(|e| Error::Config(format!("output directory {} is not usable: {e}", dir.display())))?;
    if !meta.is_dir() || meta.permissions().readonly() {
        return Err(Error::Config(format!("output directory {} is not writable", dir.display())));
    }
    Ok(())
}
