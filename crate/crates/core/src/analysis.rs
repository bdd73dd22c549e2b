//! Parameter sweeps, correlation values of trained delay models and
//! trajectory dumps. All outputs are CSV.

use std::io::Write;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::readout::readout_correlations;
use crate::trainer::{load_datasets, train, Parameters, SampleTrajectory, Setup, TrainConfig};

pub const SWEEP_HEADER: &str = "param1,param2,test_acc,final_loss,diverged_samples";
pub const CORRELATION_HEADER: &str = "sample_id,class_l,true_class,z_tilde";
pub const TRAJECTORY_HEADER: &str = "t,sample_id,component,value";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    /// `name=v1,v2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis '{s}' is not 'name=v1,v2,...'")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis '{name}' has no values")));
        }
        Ok(Self {
            name: name.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    pub template: TrainConfig,
}

impl SweepSpec {
    /// Checks the axes and that every cell yields a valid configuration.
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::Config(format!(
                "a sweep needs one or two axes, got {}",
                self.axes.len()
            )));
        }
        for cell in self.cells() {
            self.cell_config(&cell)?;
        }
        Ok(())
    }

    /// Value indices of every cell, first axis outermost.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![vec![]];
        for axis in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    (0..axis.values.len()).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn cell_config(&self, cell: &[usize]) -> Result<TrainConfig> {
        let mut c = self.template.clone();
        c.metrics_path = None;
        c.checkpoint_path = None;
        for (axis, &i) in self.axes.iter().zip(cell) {
            c.set(&axis.name, &axis.values[i])?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param1: String,
    pub param2: String,
    pub test_acc: f64,
    pub final_loss: f64,
    pub diverged_samples: usize,
    /// Set when the cell failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

/// Trains one model per cell. Cells use the template seed, so a single-cell
/// sweep reproduces `train` exactly. A failed cell is recorded and the sweep
/// continues. `final_loss` is the last epoch's training loss and
/// `diverged_samples` counts dropped training passes over the whole run.
pub fn run_sweep(spec: &SweepSpec, exec: &Executor) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let cells = spec.cells();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let value = |a: usize| spec.axes.get(a).map(|ax| ax.values[cell[a]].clone()).unwrap_or_default();
        let outcome = spec
            .cell_config(cell)
            .and_then(|c| {
                let (tr, te) = load_datasets(&c)?;
                train(&c, &tr, &te, exec)
            });
        rows.push(match outcome {
            Ok(o) => {
                let last = o.log.last().expect("epochs >= 1");
                SweepRow {
                    param1: value(0),
                    param2: value(1),
                    test_acc: last.test_acc,
                    final_loss: last.train_loss,
                    diverged_samples: o.log.total_train_diverged(),
                    error: None,
                }
            }
            Err(e) => SweepRow {
                param1: value(0),
                param2: value(1),
                test_acc: f64::NAN,
                final_loss: f64::NAN,
                diverged_samples: 0,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.param1, r.param2, r.test_acc, r.final_loss, r.diverged_samples
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationRecord {
    pub sample_id: usize,
    pub class_l: usize,
    pub true_class: usize,
    pub z_tilde: f64,
}

/// Correlation values `z~_l = integral of omega_l(t) xi_k(t)` over the final
/// delay interval (trapezoid rule, no bias) for the first `instances`
/// samples of `data`. Diverged samples are skipped.
pub fn correlations(
    setup: &Setup,
    params: &Parameters,
    data: &LabeledDataset,
    instances: usize,
    exec: &Executor,
) -> Result<Vec<CorrelationRecord>> {
    let readout = params.time_resolved()?;
    setup.check_parameters(params)?;
    setup.check_dataset(data)?;
    let n = instances.min(data.len());
    let per_sample = exec.map_indices(n, |k| -> Result<Option<Vec<f64>>> {
        match setup.forward(params, data, k) {
            Ok(SampleTrajectory::Delay(t)) => Ok(Some(readout_correlations(&t.tail(&[0]), readout, setup.grid.dt)?)),
            Ok(SampleTrajectory::Ode(_)) => Err(Error::Config("correlations need a delay experiment".into())),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut out = Vec::with_capacity(n * readout.n_classes);
    for (k, z) in per_sample.into_iter().enumerate() {
        if let Some(z) = z? {
            for (l, zl) in z.into_iter().enumerate() {
                out.push(CorrelationRecord {
                    sample_id: k,
                    class_l: l,
                    true_class: data.labels[k],
                    z_tilde: zl,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_correlations_csv(records: &[CorrelationRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CORRELATION_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.sample_id, r.class_l, r.true_class, r.z_tilde)?;
    }
    Ok(())
}

/// Summary used to judge the correlation structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSummary {
    /// Fraction of samples whose own-class value exceeds every other class.
    pub own_class_largest: f64,
    pub median_same: f64,
    pub median_other: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize_correlations(records: &[CorrelationRecord]) -> CorrelationSummary {
    let same: Vec<f64> = records.iter().filter(|r| r.class_l == r.true_class).map(|r| r.z_tilde).collect();
    let other: Vec<f64> = records.iter().filter(|r| r.class_l != r.true_class).map(|r| r.z_tilde).collect();
    let mut samples: Vec<usize> = records.iter().map(|r| r.sample_id).collect();
    samples.dedup();
    let wins = samples
        .iter()
        .filter(|&&k| {
            let rows: Vec<&CorrelationRecord> = records.iter().filter(|r| r.sample_id == k).collect();
            let own = rows.iter().find(|r| r.class_l == r.true_class).map(|r| r.z_tilde);
            match own {
                Some(o) => rows.iter().filter(|r| r.class_l != r.true_class).all(|r| o > r.z_tilde),
                None => false,
            }
        })
        .count();
    CorrelationSummary {
        own_class_largest: if samples.is_empty() { 0.0 } else { wins as f64 / samples.len() as f64 },
        median_same: median(same),
        median_other: median(other),
    }
}

/// Which grid points a trajectory dump covers.
#[derive(Debug, Clone, PartialEq)]
pub enum DumpTimes {
    /// Every `stride`-th stored sample (delay dumps start at `-tau`).
    All { stride: usize },
    /// The stored sample nearest to each listed time.
    At(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub sample_id: usize,
    pub component: usize,
    pub value: f64,
}

/// State trajectories of the given samples. Delay dumps include the encoded
/// history on `[-tau, 0]`.
pub fn trajdump(
    setup: &Setup,
    params: &Parameters,
    data: &LabeledDataset,
    sample_ids: &[usize],
    times: &DumpTimes,
) -> Result<Vec<TrajectoryRow>> {
    setup.check_parameters(params)?;
    setup.check_dataset(data)?;
    if let Some(bad) = sample_ids.iter().find(|&&k| k >= data.len()) {
        return Err(Error::Config(format!(
            "unknown sample id {bad} (dataset has {} samples)",
            data.len()
        )));
    }
    if let DumpTimes::All { stride: 0 } = times {
        return Err(Error::Config("dump stride must be at least 1".into()));
    }
    let grid = &setup.grid;
    let mut rows = Vec::new();
    if let DumpTimes::At(ts) = times {
        if ts.is_empty() {
            return Ok(rows);
        }
    }
    for &k in sample_ids {
        let traj = setup.forward(params, data, k)?;
        // (global index, time) of the stored samples
        let (first_t, count, dim): (f64, usize, usize) = match &traj {
            SampleTrajectory::Ode(t) => (grid.t_start, t.len(), t.dim),
            SampleTrajectory::Delay(t) => (grid.t_start - grid.tau().unwrap_or(0.0), t.m_tau + t.n_steps + 1, t.dim),
        };
        let state = |g: usize| -> &[f64] {
            match &traj {
                SampleTrajectory::Ode(t) => t.state(g),
                SampleTrajectory::Delay(t) => t.global(g),
            }
        };
        let time_of = |g: usize| first_t + g as f64 * grid.dt;
        let indices: Vec<usize> = match times {
            DumpTimes::All { stride } => (0..count).step_by(*stride).collect(),
            DumpTimes::At(ts) => ts
                .iter()
                .map(|&t| {
                    let g = ((t - first_t) / grid.dt).round();
                    if g < 0.0 || g as usize >= count || !t.is_finite() {
                        Err(Error::Config(format!(
                            "time {t} is outside [{first_t}, {}]",
                            time_of(count - 1)
                        )))
                    } else {
                        Ok(g as usize)
                    }
                })
                .collect::<Result<_>>()?,
        };
        for g in indices {
            for (c, &v) in state(g).iter().enumerate().take(dim) {
                rows.push(TrajectoryRow {
                    t: time_of(g),
                    sample_id: k,
                    component: c,
                    value: v,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.t, r.sample_id, r.component, r.value)?;
    }
    Ok(())
}
