//! Adjoint gradients against central finite differences of the loss.


use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::{generate_spirals, LabeledDataset, SpiralSpec};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::{derive_seed, SeededRng};
use crate::ode::GradientMode;

use super::config::{ExperimentKind, TrainConfig};
use super::model::{Parameters, Setup, GROUP_NAMES};

/// Error of one parameter group: `max_rel = max|g - fd| / max|fd|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupError {
    pub group: &'static str,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub kind: ExperimentKind,
    pub n_steps: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub rows: Vec<(GradientMode, GroupError)>,
}

impl GradCheckReport {
    pub fn max_rel(&self, mode: GradientMode) -> f64 {
        self.rows
            .iter()
            .filter(|(m, _)| *m == mode)
            .map(|(_, e)| e.max_rel)
            .fold(0.0, f64::max)
    }

    pub fn group(&self, mode: GradientMode, group: &str) -> Option<GroupError> {
        self.rows
            .iter()
            .find(|(m, e)| *m == mode && e.group == group)
            .map(|(_, e)| *e)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "kind,n_steps,samples,epsilon,mode,group,max_abs_error,max_rel_error")?;
        for (mode, e) in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{:e},{:e}",
                self.kind, self.n_steps, self.samples, self.epsilon, mode, e.group, e.max_abs, e.max_rel
            )?;
        }
        Ok(())
    }
}

/// Small labelled set for a gradient check. Image kinds get random 2x2
/// images so that short delay intervals can hold the encoding.
pub fn small_dataset(kind: ExperimentKind, count: usize, seed: u64) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::Config("gradient checks need at least one sample".into()));
    }
    match kind {
        ExperimentKind::OeoMnist => {
            let mut rng = SeededRng::new(seed);
            let inputs = (0..4 * count).map(|_| rng.random::<f64>()).collect();
            let labels = (0..count).map(|_| rng.random_range(0..10)).collect();
            let mut d = LabeledDataset::new(4, 10, inputs, labels)?;
            d.image_shape = Some((2, 2));
            Ok(d)
        }
        _ => {
            let spec = SpiralSpec {
                count_per_class: count.div_ceil(2),
                ..SpiralSpec::default()
            };
            generate_spirals(spec, seed)?.head(count)
        }
    }
}

/// Initial parameters with seeded random perturbations, so that every group
/// has a non-trivial gradient.
pub fn random_parameters(setup: &Setup, seed: u64) -> Result<Parameters> {
    let mut rng = SeededRng::new(seed);
    let n = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()));
    let mut params = setup.init_parameters();
    match &mut params {
        Parameters::Ode { controls, readout } => {
            let noise = n(0.5)?;
            controls.values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            let w = n(1.0)?;
            readout.omega.iter_mut().for_each(|v| *v = w.sample(&mut rng));
            readout.bias.iter_mut().for_each(|v| *v = 0.5 * w.sample(&mut rng));
        }
        Parameters::Delay { controls, readout } => {
            let noise = n(0.3)?;
            controls.values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            // scale so that the readout integral over one delay is O(1)
            let tau = setup.config.tau_us;
            let w = n(3.0 / tau)?;
            readout.omega_t.iter_mut().for_each(|v| *v = w.sample(&mut rng));
            let b = Uniform::new(-0.5, 0.5).map_err(|e| Error::Config(e.to_string()))?;
            readout.bias.iter_mut().for_each(|v| *v = b.sample(&mut rng));
        }
    }
    Ok(params)
}

fn finite_difference(
    setup: &Setup,
    exec: &Executor,
    params: &Parameters,
    data: &LabeledDataset,
    epsilon: f64,
) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    let lens = params.group_lens();
    let mut work = params.clone();
    for g in 0..3 {
        out[g] = Vec::with_capacity(lens[g]);
        for i in 0..lens[g] {
            let orig = work.groups()[g][i];
            work.groups_mut()[g][i] = orig + epsilon;
            let plus = setup.loss(exec, &work, data)?;
            work.groups_mut()[g][i] = orig - epsilon;
            let minus = setup.loss(exec, &work, data)?;
            work.groups_mut()[g][i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of group '{}'", GROUP_NAMES[g])));
            }
            out[g].push((plus - minus) / (2.0 * epsilon));
        }
    }
    Ok(out)
}

fn compare(group: &'static str, analytic: &[f64], reference: &[f64]) -> GroupError {
    let max_abs = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    GroupError {
        group,
        max_abs,
        max_rel: if scale > 0.0 { max_abs / scale } else { max_abs },
    }
}

/// Compares both adjoint modes against central differences with step
/// `epsilon` on `sample_count` samples and seeded random parameters.
pub fn gradient_check(config: &TrainConfig, sample_count: usize, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let setup = Setup::new(config)?;
    let exec = Executor::sequential();
    let data = small_dataset(config.kind, sample_count, derive_seed(config.seed, 0))?;
    let params = random_parameters(&setup, derive_seed(config.seed, 1))?;
    let fd = finite_difference(&setup, &exec, &params, &data, epsilon)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    for mode in [GradientMode::Discrete, GradientMode::Continuous] {
        let g = setup.batch_gradient(&exec, &params, &data, &all, mode)?;
        if g.diverged > 0 {
            return Err(Error::NonFinite(format!("{} samples diverged in the gradient check", g.diverged)));
        }
        for (k, name) in GROUP_NAMES.iter().enumerate() {
            rows.push((mode, compare(name, g.groups()[k], &fd[k])));
        }
    }
    Ok(GradCheckReport {
        kind: config.kind,
        n_steps: setup.grid.n_steps,
        samples: data.len(),
        epsilon,
        rows,
    })
}

/// The same continuous-time parameters on a grid `factor` times finer:
/// step values are held, readout weight samples linearly interpolated.
pub fn refine_parameters(params: &Parameters, factor: usize) -> Result<Parameters> {
    if factor == 0 {
        return Err(Error::Config("refinement factor must be positive".into()));
    }
    let mut out = params.clone();
    match (&mut out, params) {
        (Parameters::Ode { controls: fine, .. }, Parameters::Ode { controls, .. }) => {
            let stride = crate::ode::OdeControls::stride(controls.dim);
            fine.n_steps = controls.n_steps * factor;
            fine.values = controls
                .values
                .chunks_exact(stride)
                .flat_map(|c| std::iter::repeat_n(c, factor).flatten().copied())
                .collect();
        }
        (Parameters::Delay { controls: fine, readout: fr }, Parameters::Delay { controls, readout }) => {
            let du = controls.dim;
            fine.n_steps = controls.n_steps * factor;
            fine.values = controls
                .values
                .chunks_exact(du)
                .flat_map(|c| std::iter::repeat_n(c, factor).flatten().copied())
                .collect();
            let stride = readout.n_classes * readout.dim;
            let m = readout.n_samples - 1;
            fr.n_samples = m * factor + 1;
            fr.omega_t = Vec::with_capacity(fr.n_samples * stride);
            for i in 0..fr.n_samples {
                let j = i / factor;
                let s = (i % factor) as f64 / factor as f64;
                let lo = readout.omega_at(j);
                let hi = readout.omega_at((j + 1).min(m));
                fr.omega_t.extend(lo.iter().zip(hi).map(|(a, b)| a + s * (b - a)));
            }
        }
        _ => unreachable!("clone preserves the variant"),
    }
    Ok(out)
}

/// Group errors `max|g_cont - g_disc| / max|g_disc|` at the configured grid
/// and at a grid refined by `factor` (same continuous-time instance).
pub fn consistency_errors(
    config: &TrainConfig,
    sample_count: usize,
    factor: usize,
) -> Result<Vec<(GroupError, GroupError)>> {
    let coarse = Setup::new(config)?;
    let mut fine_cfg = config.clone();
    if config.kind.is_delay() {
        fine_cfg.m_tau *= factor;
    } else {
        fine_cfg.n_steps *= factor;
        fine_cfg.dt /= factor as f64;
    }
    let mut fine = Setup::new(&fine_cfg)?;
    fine.encode_refine = factor;
    let exec = Executor::sequential();
    let data = small_dataset(config.kind, sample_count, derive_seed(config.seed, 0))?;
    let params = random_parameters(&coarse, derive_seed(config.seed, 1))?;
    let fine_params = refine_parameters(&params, factor)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let errors = |setup: &Setup, p: &Parameters| -> Result<Vec<GroupError>> {
        let d = setup.batch_gradient(&exec, p, &data, &all, GradientMode::Discrete)?;
        let c = setup.batch_gradient(&exec, p, &data, &all, GradientMode::Continuous)?;
        Ok(GROUP_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| compare(name, c.groups()[k], d.groups()[k]))
            .collect())
    };
    let a = errors(&coarse, &params)?;
    let b = errors(&fine, &fine_params)?;
    Ok(a.into_iter().zip(b).collect())
}
