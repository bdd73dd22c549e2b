//! Softmax readout, cross-entropy loss and the softmax/cross-entropy residual.

use crate::error::{check_len, Error, Result};
use crate::numerics::trapezoid_weights;

/// Lower clamp for probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Linear readout of the end state: `z = omega * r(T) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndState {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `n_classes x dim`.
    pub omega: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EndState {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            omega: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("EndState omega", self.n_classes * self.dim, self.omega.len())?;
        check_len("EndState bias", self.n_classes, self.bias.len())?;
        ensure_finite("EndState", self.omega.iter().chain(&self.bias))
    }
}

/// Time-resolved readout over the final delay interval:
/// `z_l = integral of omega_l(t) . r(t) over [T - tau, T] + b_l`.
///
/// `omega_t` holds one row-major `n_classes x dim` matrix per grid sample of
/// the final interval (`n_samples = m_tau + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeResolved {
    pub n_classes: usize,
    /// Number of observed state components.
    pub dim: usize,
    pub n_samples: usize,
    pub omega_t: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TimeResolved {
    pub fn zeros(n_classes: usize, dim: usize, n_samples: usize) -> Self {
        Self {
            n_classes,
            dim,
            n_samples,
            omega_t: vec![0.0; n_classes * dim * n_samples],
            bias: vec![0.0; n_classes],
        }
    }

    /// Weight matrix at sample `j` of the final interval.
    #[inline]
    pub fn omega_at(&self, j: usize) -> &[f64] {
        let stride = self.n_classes * self.dim;
        &self.omega_t[j * stride..(j + 1) * stride]
    }

    pub fn validate(&self) -> Result<()> {
        check_len(
            "TimeResolved omega_t",
            self.n_classes * self.dim * self.n_samples,
            self.omega_t.len(),
        )?;
        check_len("TimeResolved bias", self.n_classes, self.bias.len())?;
        if self.n_samples < 2 {
            return Err(Error::Config("time-resolved readout needs at least 2 samples".into()));
        }
        ensure_finite("TimeResolved", self.omega_t.iter().chain(&self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReadoutParams {
    EndState(EndState),
    TimeResolved(TimeResolved),
}

/// Loss, softmax outputs and accuracy over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Row-major `K x L` softmax outputs. Rows of diverged samples are NaN.
    pub per_sample_outputs: Vec<f64>,
    pub n_classes: usize,
    pub accuracy: f64,
    /// Samples whose forward pass diverged. They are excluded from the loss
    /// and counted as misclassified.
    pub diverged: usize,
}

impl LossReport {
    pub fn outputs(&self, k: usize) -> &[f64] {
        &self.per_sample_outputs[k * self.n_classes..(k + 1) * self.n_classes]
    }

    pub fn n_samples(&self) -> usize {
        self.per_sample_outputs.len() / self.n_classes.max(1)
    }
}

fn ensure_finite<'a>(what: &str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    ensure_finite("softmax logits", z.iter())?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= s);
    Ok(y)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in y.iter().enumerate() {
        if *v > y[best] {
            best = i;
        }
    }
    best
}

/// Per-sample loss `-sum_l t_l ln max(y_l, LOG_CLAMP)`.
pub fn sample_cross_entropy(target: &[f64], output: &[f64]) -> Result<f64> {
    check_len("cross_entropy row", target.len(), output.len())?;
    Ok(-target
        .iter()
        .zip(output)
        .map(|(t, y)| if *t == 0.0 { 0.0 } else { t * y.max(LOG_CLAMP).ln() })
        .sum::<f64>())
}

/// Mean cross-entropy over `K` row-major `K x L` target and output matrices.
pub fn cross_entropy(targets: &[f64], outputs: &[f64], n_classes: usize) -> Result<f64> {
    check_len("cross_entropy", targets.len(), outputs.len())?;
    if n_classes == 0 || !targets.len().is_multiple_of(n_classes) {
        return Err(Error::Shape {
            context: "cross_entropy classes",
            expected: n_classes,
            actual: targets.len(),
        });
    }
    let k = targets.len() / n_classes;
    if k == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, y) in targets
        .chunks_exact(n_classes)
        .zip(outputs.chunks_exact(n_classes))
    {
        total += sample_cross_entropy(t, y)?;
    }
    Ok(total / k as f64)
}

/// `dJ/dz = (y - t) / K` for one sample of a batch of size `batch_size`.
pub fn sample_residual(target: &[f64], output: &[f64], batch_size: usize) -> Result<Vec<f64>> {
    check_len("loss_residual row", target.len(), output.len())?;
    let inv_k = 1.0 / batch_size as f64;
    Ok(output
        .iter()
        .zip(target)
        .map(|(y, t)| (y - t) * inv_k)
        .collect())
}

/// Residual matrix `(y_{l,k} - t_{l,k}) / K`, row-major `K x L`.
pub fn loss_residual(targets: &[f64], outputs: &[f64], n_classes: usize) -> Result<Vec<f64>> {
    check_len("loss_residual", targets.len(), outputs.len())?;
    if n_classes == 0 || !targets.len().is_multiple_of(n_classes) {
        return Err(Error::Shape {
            context: "loss_residual classes",
            expected: n_classes,
            actual: targets.len(),
        });
    }
    let k = targets.len() / n_classes;
    let mut out = Vec::with_capacity(targets.len());
    for (t, y) in targets
        .chunks_exact(n_classes)
        .zip(outputs.chunks_exact(n_classes))
    {
        out.extend(sample_residual(t, y, k)?);
    }
    Ok(out)
}

pub fn readout_endstate(end_state: &[f64], params: &EndState) -> Result<Vec<f64>> {
    check_len("readout_endstate", params.dim, end_state.len())?;
    Ok(params
        .omega
        .chunks_exact(params.dim)
        .zip(&params.bias)
        .map(|(row, b)| row.iter().zip(end_state).map(|(w, r)| w * r).sum::<f64>() + b)
        .collect())
}

/// Trapezoid integral of `omega(t) . r(t)` over the tail, without bias.
///
/// `tail` is row-major `n_samples x dim` (observed components only).
pub fn readout_correlations(tail: &[f64], params: &TimeResolved, dt: f64) -> Result<Vec<f64>> {
    check_len("readout tail", params.n_samples * params.dim, tail.len())?;
    let w = trapezoid_weights(params.n_samples, dt)?;
    let mut z = vec![0.0; params.n_classes];
    for (j, (r, wj)) in tail.chunks_exact(params.dim).zip(&w).enumerate() {
        let om = params.omega_at(j);
        for (l, zl) in z.iter_mut().enumerate() {
            let row = &om[l * params.dim..(l + 1) * params.dim];
            *zl += wj * row.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(z)
}

pub fn readout_timeresolved(tail: &[f64], params: &TimeResolved, dt: f64) -> Result<Vec<f64>> {
    let mut z = readout_correlations(tail, params, dt)?;
    z.iter_mut().zip(&params.bias).for_each(|(z, b)| *z += b);
    Ok(z)
}
