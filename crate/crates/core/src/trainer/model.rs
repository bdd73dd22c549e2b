//! Parameters, per-sample passes and batch reductions shared by training,
//! evaluation and gradient checks.

use crate::data::{encode_image_input, encode_spiral_input, LabeledDataset};
use crate::delay::{accumulate_readout_gradient_delay, forward_delay, ControlSchedule, DelayHistory, DelayTrajectory};
use crate::error::{check_len, Error, Result};
use crate::exec::Executor;
use crate::numerics::TimeGrid;
use crate::ode::{
    accumulate_control_gradient_ode, backward_adjoint_ode, endstate_pullback, forward_ode, GradientMode,
    OdeControls, Trajectory,
};
use crate::oeo::{closed_form_adjoint, closed_form_control_gradient, OeoModel};
use crate::readout::{
    argmax, readout_endstate, readout_timeresolved, sample_cross_entropy, sample_residual, softmax, EndState,
    LossReport, TimeResolved,
};

use super::config::{ExperimentKind, TrainConfig};

pub const GROUP_NAMES: [&str; 3] = ["u", "omega", "bias"];

/// Trainable parameters: control schedule plus readout.
#[derive(Debug, Clone, PartialEq)]
pub enum Parameters {
    Ode { controls: OdeControls, readout: EndState },
    Delay { controls: ControlSchedule, readout: TimeResolved },
}

impl Parameters {
    pub fn groups(&self) -> [&[f64]; 3] {
        match self {
            Self::Ode { controls, readout } => [&controls.values, &readout.omega, &readout.bias],
            Self::Delay { controls, readout } => [&controls.values, &readout.omega_t, &readout.bias],
        }
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 3] {
        match self {
            Self::Ode { controls, readout } => [&mut controls.values, &mut readout.omega, &mut readout.bias],
            Self::Delay { controls, readout } => {
                [&mut controls.values, &mut readout.omega_t, &mut readout.bias]
            }
        }
    }

    pub fn group_lens(&self) -> [usize; 3] {
        self.groups().map(<[f64]>::len)
    }

    /// Time-resolved readout of a delay experiment.
    pub fn time_resolved(&self) -> Result<&TimeResolved> {
        match self {
            Self::Delay { readout, .. } => Ok(readout),
            Self::Ode { .. } => Err(Error::Config("operation needs a delay experiment".into())),
        }
    }
}

/// Accumulated `dJ/dparams` and batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub u: Vec<f64>,
    pub omega: Vec<f64>,
    pub bias: Vec<f64>,
    /// Sum of per-sample cross-entropies over non-diverged samples.
    pub loss_sum: f64,
    pub correct: usize,
    pub diverged: usize,
    pub samples: usize,
}

impl GradientSet {
    pub fn zeros(lens: [usize; 3]) -> Self {
        Self {
            u: vec![0.0; lens[0]],
            omega: vec![0.0; lens[1]],
            bias: vec![0.0; lens[2]],
            loss_sum: 0.0,
            correct: 0,
            diverged: 0,
            samples: 0,
        }
    }

    pub fn groups(&self) -> [&[f64]; 3] {
        [&self.u, &self.omega, &self.bias]
    }

    pub fn merge(&mut self, other: Self) {
        for (a, b) in [
            (&mut self.u, &other.u),
            (&mut self.omega, &other.omega),
            (&mut self.bias, &other.bias),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.diverged += other.diverged;
        self.samples += other.samples;
    }

    /// Mean cross-entropy over the samples that did not diverge.
    pub fn mean_loss(&self) -> f64 {
        let ok = self.samples - self.diverged;
        if ok == 0 {
            f64::NAN
        } else {
            self.loss_sum / ok as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.correct as f64 / self.samples as f64
        }
    }
}

/// Forward state of one sample.
pub enum SampleTrajectory {
    Ode(Trajectory),
    Delay(DelayTrajectory),
}

/// Model, grid and encoding fixed by a configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: TrainConfig,
    pub grid: TimeGrid,
    pub model: Option<OeoModel>,
    /// Encode inputs on a grid this many times coarser and hold each
    /// sample, so that refined grids see the same initial function.
    pub encode_refine: usize,
}

impl Setup {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let grid = config.grid()?;
        let model = if config.kind.is_delay() {
            Some(OeoModel::new(config.oeo_params())?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            grid,
            model,
            encode_refine: 1,
        })
    }

    pub fn kind(&self) -> ExperimentKind {
        self.config.kind
    }

    pub fn n_classes(&self) -> usize {
        self.config.kind.n_classes()
    }

    fn oeo(&self) -> &OeoModel {
        self.model.as_ref().expect("delay setups carry a model")
    }

    fn m_tau(&self) -> usize {
        self.grid.m_tau.unwrap_or(0)
    }

    /// Deterministic initial parameters.
    pub fn init_parameters(&self) -> Parameters {
        let l = self.n_classes();
        let n = self.grid.n_steps;
        if self.kind().is_delay() {
            Parameters::Delay {
                controls: OeoModel::initial_controls(n),
                readout: TimeResolved::zeros(l, 1, self.m_tau() + 1),
            }
        } else {
            Parameters::Ode {
                controls: OdeControls::identity(2, n),
                readout: EndState::zeros(l, 2),
            }
        }
    }

    /// Checks parameter shapes against this setup.
    pub fn check_parameters(&self, params: &Parameters) -> Result<()> {
        let expected = self.init_parameters().group_lens();
        let actual = params.group_lens();
        for ((e, a), name) in expected.iter().zip(&actual).zip(GROUP_NAMES) {
            if e != a {
                return Err(Error::Config(format!(
                    "parameter group '{name}' has {a} entries, this configuration needs {e}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        check_len("dataset classes", self.n_classes(), data.n_classes)?;
        match self.kind() {
            ExperimentKind::OeoMnist => {
                if data.image_shape.is_none() {
                    return Err(Error::Config("oeo_mnist needs an image dataset".into()));
                }
            }
            _ => check_len("dataset features", 2, data.n_features)?,
        }
        Ok(())
    }

    pub fn encode(&self, data: &LabeledDataset, k: usize) -> Result<DelayHistory> {
        let x = data.input(k);
        let f = self.encode_refine.max(1);
        if !self.m_tau().is_multiple_of(f) {
            return Err(Error::Config(format!(
                "m_tau = {} is not divisible by encode_refine = {f}",
                self.m_tau()
            )));
        }
        let m = self.m_tau() / f;
        let coarse = match self.kind() {
            ExperimentKind::OeoMnist => {
                let (rows, cols) = data
                    .image_shape
                    .ok_or_else(|| Error::Config("image dataset without a shape".into()))?;
                encode_image_input(x, rows, cols, m)?
            }
            _ => encode_spiral_input(x, m)?,
        };
        if f == 1 {
            return Ok(coarse);
        }
        let mut samples = Vec::with_capacity(2 * (self.m_tau() + 1));
        for i in 0..=self.m_tau() {
            samples.extend_from_slice(coarse.sample(i / f));
        }
        Ok(DelayHistory {
            dim: coarse.dim,
            m_tau: self.m_tau(),
            samples,
        })
    }

    /// Forward pass of sample `k`.
    pub fn forward(&self, params: &Parameters, data: &LabeledDataset, k: usize) -> Result<SampleTrajectory> {
        match params {
            Parameters::Ode { controls, .. } => Ok(SampleTrajectory::Ode(forward_ode(data.input(k), controls, &self.grid)?)),
            Parameters::Delay { controls, .. } => {
                let h = self.encode(data, k)?;
                Ok(SampleTrajectory::Delay(forward_delay(
                    &h,
                    controls,
                    self.oeo(),
                    &self.grid,
                    self.config.divergence_bound,
                )?))
            }
        }
    }

    /// Logits from a forward trajectory.
    pub fn logits(&self, params: &Parameters, traj: &SampleTrajectory) -> Result<Vec<f64>> {
        match (params, traj) {
            (Parameters::Ode { readout, .. }, SampleTrajectory::Ode(t)) => readout_endstate(t.end_state(), readout),
            (Parameters::Delay { readout, .. }, SampleTrajectory::Delay(t)) => {
                readout_timeresolved(&t.tail(&[0]), readout, self.grid.dt)
            }
            _ => Err(Error::Config("trajectory does not match the parameters".into())),
        }
    }

    /// Softmax output of sample `k`, or `None` if its forward pass diverged.
    pub fn predict(&self, params: &Parameters, data: &LabeledDataset, k: usize) -> Result<Option<Vec<f64>>> {
        match self.forward(params, data, k) {
            Ok(t) => Ok(Some(softmax(&self.logits(params, &t)?)?)),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Forward, loss and backward pass for sample `k`, adding
    /// `dJ/dparams` of `J = (1/batch_size) sum CE` into `acc`.
    pub fn accumulate_sample(
        &self,
        params: &Parameters,
        data: &LabeledDataset,
        k: usize,
        batch_size: usize,
        mode: GradientMode,
        acc: &mut GradientSet,
    ) -> Result<()> {
        acc.samples += 1;
        match self.sample_gradient(params, data, k, batch_size, mode, acc) {
            Ok(()) => Ok(()),
            Err(Error::Divergence { .. }) => {
                acc.diverged += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn sample_gradient(
        &self,
        params: &Parameters,
        data: &LabeledDataset,
        k: usize,
        batch_size: usize,
        mode: GradientMode,
        acc: &mut GradientSet,
    ) -> Result<()> {
        let target = data.target(k);
        let dt = self.grid.dt;
        let traj = self.forward(params, data, k)?;
        let y = softmax(&self.logits(params, &traj)?)?;
        let residual = sample_residual(target, &y, batch_size)?;
        // Build the full contribution first so a divergent backward sweep
        // leaves `acc` untouched.
        let mut du = vec![0.0; acc.u.len()];
        match (params, &traj) {
            (Parameters::Ode { controls, readout }, SampleTrajectory::Ode(t)) => {
                let p_end = endstate_pullback(&residual, readout);
                let adj = backward_adjoint_ode(t, controls, &p_end, &self.grid, mode)?;
                accumulate_control_gradient_ode(&adj, t, controls, dt, &mut du)?;
                let r = t.end_state();
                for (l, res) in residual.iter().enumerate() {
                    for (j, rj) in r.iter().enumerate() {
                        acc.omega[l * readout.dim + j] += res * rj;
                    }
                }
                acc.bias.iter_mut().zip(&residual).for_each(|(b, r)| *b += r);
            }
            (Parameters::Delay { controls, readout }, SampleTrajectory::Delay(t)) => {
                let model = self.oeo();
                let adj = closed_form_adjoint(t, controls, &model.params, readout, &residual, &self.grid, mode)?;
                closed_form_control_gradient(&adj, t, controls, &model.params, dt, &mut du)?;
                accumulate_readout_gradient_delay(
                    &t.tail(&[0]),
                    &residual,
                    readout,
                    dt,
                    1.0,
                    &mut acc.omega,
                    &mut acc.bias,
                )?;
            }
            _ => return Err(Error::Config("trajectory does not match the parameters".into())),
        }
        acc.u.iter_mut().zip(&du).for_each(|(a, d)| *a += d);
        acc.loss_sum += sample_cross_entropy(target, &y)?;
        if argmax(&y) == data.labels[k] {
            acc.correct += 1;
        }
        Ok(())
    }

    /// Gradient of the mean batch loss over `indices`, reduced in a fixed
    /// order independent of the executor.
    pub fn batch_gradient(
        &self,
        exec: &Executor,
        params: &Parameters,
        data: &LabeledDataset,
        indices: &[usize],
        mode: GradientMode,
    ) -> Result<GradientSet> {
        let lens = params.group_lens();
        let b = indices.len();
        exec.reduce(
            indices,
            || GradientSet::zeros(lens),
            |acc, _, &k| self.accumulate_sample(params, data, k, b, mode, acc),
            GradientSet::merge,
        )
    }

    /// Forward-only evaluation. Diverged samples are excluded from the loss
    /// and counted as misclassified.
    pub fn evaluate(&self, exec: &Executor, params: &Parameters, data: &LabeledDataset) -> Result<LossReport> {
        self.check_parameters(params)?;
        self.check_dataset(data)?;
        let l = self.n_classes();
        let outputs = exec.map_indices(data.len(), |k| self.predict(params, data, k));
        let mut per_sample_outputs = Vec::with_capacity(data.len() * l);
        let (mut loss, mut correct, mut diverged) = (0.0, 0usize, 0usize);
        for (k, y) in outputs.into_iter().enumerate() {
            match y? {
                Some(y) => {
                    loss += sample_cross_entropy(data.target(k), &y)?;
                    if argmax(&y) == data.labels[k] {
                        correct += 1;
                    }
                    per_sample_outputs.extend(y);
                }
                None => {
                    diverged += 1;
                    per_sample_outputs.extend(std::iter::repeat_n(f64::NAN, l));
                }
            }
        }
        let ok = data.len() - diverged;
        Ok(LossReport {
            loss: if ok == 0 { f64::NAN } else { loss / ok as f64 },
            per_sample_outputs,
            n_classes: l,
            accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
            diverged,
        })
    }

    /// Mean loss over `data` (forward only), used by finite differences.
    pub fn loss(&self, exec: &Executor, params: &Parameters, data: &LabeledDataset) -> Result<f64> {
        Ok(self.evaluate(exec, params, data)?.loss)
    }
}
