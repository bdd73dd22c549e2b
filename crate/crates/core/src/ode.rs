//! Controlled flow `dr/dt = tanh(a(t) r + b(t))`: Euler forward pass,
//! adjoint backward pass and control gradients.

use crate::error::{check_len, Error, Result};
use crate::numerics::TimeGrid;
use crate::readout::{readout_endstate, sample_residual, softmax, EndState};

/// How the backward pass is discretised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Euler discretisation of the continuous adjoint equations: each
    /// backward step takes the costate from `t_{i+1}` and the coefficients
    /// (Jacobians, sources) from `t_i`, and the control gradient pairs
    /// `p(t_i)` with `dF/du(t_i)`.
    #[default]
    Continuous,
    /// Exact reverse-mode derivative of the Euler recursion.
    Discrete,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "discrete" => Ok(Self::Discrete),
            other => Err(Error::Config(format!(
                "unknown gradient mode '{other}' (expected continuous|discrete)"
            ))),
        }
    }
}

impl std::fmt::Display for GradientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Continuous => "continuous",
            Self::Discrete => "discrete",
        })
    }
}

/// Piecewise-constant controls `a(t)` (`dim x dim`) and `b(t)` (`dim`), one
/// sample per grid step. Stored per step as `[a row-major, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeControls {
    pub dim: usize,
    pub n_steps: usize,
    pub values: Vec<f64>,
}

impl OdeControls {
    #[inline]
    pub fn stride(dim: usize) -> usize {
        dim * dim + dim
    }

    /// `a = identity`, `b = 0` at every step.
    pub fn identity(dim: usize, n_steps: usize) -> Self {
        let stride = Self::stride(dim);
        let mut values = vec![0.0; stride * n_steps];
        for step in values.chunks_exact_mut(stride) {
            for i in 0..dim {
                step[i * dim + i] = 1.0;
            }
        }
        Self {
            dim,
            n_steps,
            values,
        }
    }

    pub fn constant(a: &[f64], b: &[f64], n_steps: usize) -> Result<Self> {
        let dim = b.len();
        check_len("OdeControls a", dim * dim, a.len())?;
        let mut values = Vec::with_capacity(Self::stride(dim) * n_steps);
        for _ in 0..n_steps {
            values.extend_from_slice(a);
            values.extend_from_slice(b);
        }
        Ok(Self {
            dim,
            n_steps,
            values,
        })
    }

    #[inline]
    pub fn a(&self, i: usize) -> &[f64] {
        let s = Self::stride(self.dim);
        &self.values[i * s..i * s + self.dim * self.dim]
    }

    #[inline]
    pub fn b(&self, i: usize) -> &[f64] {
        let s = Self::stride(self.dim);
        &self.values[i * s + self.dim * self.dim..(i + 1) * s]
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        check_len("OdeControls steps", grid.n_steps, self.n_steps)?;
        check_len(
            "OdeControls values",
            self.n_steps * Self::stride(self.dim),
            self.values.len(),
        )?;
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("ODE controls".into()))
        }
    }
}

/// State history `r(t_i)`, `i = 0..=n_steps`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub states: Vec<f64>,
}

impl Trajectory {
    #[inline]
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn end_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// Costate history `p(t_i)`, `i = 0..=n_steps`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub dim: usize,
    pub mode: GradientMode,
    pub costates: Vec<f64>,
}

impl AdjointTrajectory {
    #[inline]
    pub fn costate(&self, i: usize) -> &[f64] {
        &self.costates[i * self.dim..(i + 1) * self.dim]
    }

    /// Multiplier paired with the control on step `i`: `p(t_i)` for the
    /// continuous adjoint, `dJ/dr_{i+1}` for the discrete one.
    #[inline]
    pub fn multiplier(&self, step: usize) -> &[f64] {
        match self.mode {
            GradientMode::Continuous => self.costate(step),
            GradientMode::Discrete => self.costate(step + 1),
        }
    }
}

#[inline]
fn preactivation(a: &[f64], b: &[f64], r: &[f64], out: &mut [f64]) {
    let dim = r.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * dim..(i + 1) * dim];
        *o = row.iter().zip(r).map(|(x, y)| x * y).sum::<f64>() + b[i];
    }
}

#[inline]
fn sech2(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub fn forward_ode(input: &[f64], controls: &OdeControls, grid: &TimeGrid) -> Result<Trajectory> {
    let dim = controls.dim;
    check_len("forward_ode input", dim, input.len())?;
    check_len("forward_ode steps", grid.n_steps, controls.n_steps)?;
    let mut states = Vec::with_capacity((grid.n_steps + 1) * dim);
    states.extend_from_slice(input);
    let mut pre = vec![0.0; dim];
    for i in 0..grid.n_steps {
        let cur = &states[i * dim..(i + 1) * dim];
        preactivation(controls.a(i), controls.b(i), cur, &mut pre);
        let next: Vec<f64> = cur
            .iter()
            .zip(&pre)
            .map(|(r, p)| r + grid.dt * p.tanh())
            .collect();
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: i + 1,
                time: grid.time(i + 1),
                magnitude: bad.abs(),
            });
        }
        states.extend(next);
    }
    Ok(Trajectory { dim, states })
}

/// End condition `p(T) = omega^T (y - t) / K`. Also returns the softmax output.
pub fn adjoint_end_condition(
    end_state: &[f64],
    readout: &EndState,
    target: &[f64],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("adjoint_end_condition target", readout.n_classes, target.len())?;
    let y = softmax(&readout_endstate(end_state, readout)?)?;
    let residual = sample_residual(target, &y, batch_size)?;
    Ok((endstate_pullback(&residual, readout), y))
}

/// `omega^T residual`.
pub fn endstate_pullback(residual: &[f64], readout: &EndState) -> Vec<f64> {
    let mut p = vec![0.0; readout.dim];
    for (row, r) in readout.omega.chunks_exact(readout.dim).zip(residual) {
        for (pj, w) in p.iter_mut().zip(row) {
            *pj += w * r;
        }
    }
    p
}

/// `out = (diag(sech^2(a r + b)) a)^T q`.
#[inline]
fn jacobian_transpose_apply(a: &[f64], b: &[f64], r: &[f64], q: &[f64], pre: &mut [f64], out: &mut [f64]) {
    let dim = r.len();
    preactivation(a, b, r, pre);
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..dim {
        let v = q[i] * sech2(pre[i]);
        let row = &a[i * dim..(i + 1) * dim];
        for (o, aij) in out.iter_mut().zip(row) {
            *o += aij * v;
        }
    }
}

pub fn backward_adjoint_ode(
    traj: &Trajectory,
    controls: &OdeControls,
    p_end: &[f64],
    grid: &TimeGrid,
    mode: GradientMode,
) -> Result<AdjointTrajectory> {
    let dim = controls.dim;
    let n = grid.n_steps;
    check_len("backward_adjoint_ode end condition", dim, p_end.len())?;
    check_len("backward_adjoint_ode trajectory", (n + 1) * dim, traj.states.len())?;
    check_len("backward_adjoint_ode steps", n, controls.n_steps)?;
    let mut costates = vec![0.0; (n + 1) * dim];
    costates[n * dim..].copy_from_slice(p_end);
    let mut pre = vec![0.0; dim];
    let mut jt = vec![0.0; dim];
    for i in (0..n).rev() {
        let (head, tail) = costates.split_at_mut((i + 1) * dim);
        let later = &tail[..dim];
        // Both modes share the sweep; they differ in the gradient pairing.
        jacobian_transpose_apply(controls.a(i), controls.b(i), traj.state(i), later, &mut pre, &mut jt);
        let cur = &mut head[i * dim..];
        for ((c, l), j) in cur.iter_mut().zip(later).zip(&jt) {
            *c = l + grid.dt * j;
        }
        if let Some(bad) = cur.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: i,
                time: grid.time(i),
                magnitude: bad.abs(),
            });
        }
    }
    Ok(AdjointTrajectory {
        dim,
        mode,
        costates,
    })
}

/// Adds `scale * (p^T dF/du)^T` for one sample to `out` (laid out like the
/// controls).
pub fn accumulate_control_gradient_ode(
    adjoint: &AdjointTrajectory,
    traj: &Trajectory,
    controls: &OdeControls,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let dim = controls.dim;
    let stride = OdeControls::stride(dim);
    check_len("control gradient buffer", controls.values.len(), out.len())?;
    let mut pre = vec![0.0; dim];
    for i in 0..controls.n_steps {
        let r = traj.state(i);
        preactivation(controls.a(i), controls.b(i), r, &mut pre);
        let q = adjoint.multiplier(i);
        let g = &mut out[i * stride..(i + 1) * stride];
        for row in 0..dim {
            let v = scale * q[row] * sech2(pre[row]);
            for col in 0..dim {
                g[row * dim + col] += v * r[col];
            }
            g[dim * dim + row] += v;
        }
    }
    Ok(())
}

/// Control gradient density `dJ/du(t_i) = sum_k (p_k^T dF_k/du)^T` over a
/// batch. Multiply by `dt` for the gradient with respect to the step values.
pub fn control_gradient_ode(
    adjoints: &[AdjointTrajectory],
    trajs: &[Trajectory],
    controls: &OdeControls,
) -> Result<Vec<f64>> {
    check_len("control_gradient_ode batch", adjoints.len(), trajs.len())?;
    let mut out = vec![0.0; controls.values.len()];
    for (adj, traj) in adjoints.iter().zip(trajs) {
        accumulate_control_gradient_ode(adj, traj, controls, 1.0, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::readout::{cross_entropy, sample_cross_entropy};
    use crate::numerics::SeededRng;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn zero_controls_freeze_state() {
        let g = TimeGrid::new(0.0, 0.01, 50, None).unwrap();
        let c = OdeControls::constant(&[0.0; 4], &[0.0; 2], 50).unwrap();
        let t = forward_ode(&[0.3, -0.7], &c, &g).unwrap();
        for i in 0..=50 {
            assert_eq!(t.state(i), &[0.3, -0.7]);
        }
    }

    #[test]
    fn constant_bias_drifts_linearly() {
        let g = TimeGrid::new(0.0, 0.01, 10, None).unwrap();
        let c = OdeControls::constant(&[0.0; 4], &[0.8, 0.0], 10).unwrap();
        let t = forward_ode(&[0.0, 0.5], &c, &g).unwrap();
        for i in 0..=10 {
            assert_relative_eq!(t.state(i)[0], i as f64 * 0.01 * 0.8f64.tanh(), epsilon = 1e-15);
            assert_eq!(t.state(i)[1], 0.5);
        }
    }

    #[test]
    fn identity_flow_single_step() {
        let g = TimeGrid::new(0.0, 0.1, 1, None).unwrap();
        let c = OdeControls::identity(2, 1);
        let t = forward_ode(&[10.0, 10.0], &c, &g).unwrap();
        let oracle = 10.0 + 0.1 * 10f64.tanh();
        assert_eq!(t.end_state(), &[oracle, oracle]);
        assert_relative_eq!(oracle, 10.1, epsilon = 1e-8);
    }

    #[test]
    fn end_condition_examples() {
        let mut ro = EndState::zeros(2, 2);
        // y = t gives zero (up to softmax saturation)
        ro.bias = vec![800.0, 0.0];
        let (p, _) = adjoint_end_condition(&[0.1, 0.2], &ro, &[1.0, 0.0], 1).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);

        ro.omega = vec![1.0, 0.0, 0.0, 1.0];
        ro.bias = vec![0.0, 0.0];
        let (p, y) = adjoint_end_condition(&[0.0, 0.0], &ro, &[1.0, 0.0], 1).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
        assert_eq!(p, vec![-0.5, 0.5]);

        let cancel = EndState {
            n_classes: 2,
            dim: 2,
            omega: vec![1.0, 0.0, 1.0, 0.0],
            bias: vec![0.0, 0.0],
        };
        assert_eq!(endstate_pullback(&[-0.3, 0.3], &cancel), vec![0.0, 0.0]);
    }

    #[test]
    fn quiescent_and_constant_adjoints() {
        let g = TimeGrid::new(0.0, 0.05, 20, None).unwrap();
        let mut rng = SeededRng::new(5);
        let mut c = OdeControls::identity(2, 20);
        c.values.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        let t = forward_ode(&[0.2, 0.1], &c, &g).unwrap();
        for mode in [GradientMode::Continuous, GradientMode::Discrete] {
            let adj = backward_adjoint_ode(&t, &c, &[0.0, 0.0], &g, mode).unwrap();
            assert!(adj.costates.iter().all(|v| *v == 0.0));
        }

        let zero_a = OdeControls::constant(&[0.0; 4], &[0.3, -0.2], 20).unwrap();
        let t = forward_ode(&[0.2, 0.1], &zero_a, &g).unwrap();
        for mode in [GradientMode::Continuous, GradientMode::Discrete] {
            let adj = backward_adjoint_ode(&t, &zero_a, &[0.4, -1.0], &g, mode).unwrap();
            for i in 0..=20 {
                assert_eq!(adj.costate(i), &[0.4, -1.0]);
            }
        }
    }

    #[test]
    fn gradient_density_hand_example() {
        let g = TimeGrid::new(0.0, 0.1, 4, None).unwrap();
        let c = OdeControls::constant(&[0.0; 4], &[0.0; 2], 4).unwrap();
        let t = forward_ode(&[1.0, 0.0], &c, &g).unwrap();
        for mode in [GradientMode::Continuous, GradientMode::Discrete] {
            let adj = backward_adjoint_ode(&t, &c, &[1.0, 0.0], &g, mode).unwrap();
            let grad = control_gradient_ode(&[adj], std::slice::from_ref(&t), &c).unwrap();
            for step in grad.chunks_exact(6) {
                assert_eq!(step, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            }
        }
        let zero_adj = AdjointTrajectory {
            dim: 2,
            mode: GradientMode::Discrete,
            costates: vec![0.0; 10],
        };
        let grad = control_gradient_ode(&[zero_adj], &[t], &c).unwrap();
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    fn loss(inputs: &[[f64; 2]], labels: &[usize], c: &OdeControls, ro: &EndState, g: &TimeGrid) -> f64 {
        let mut targets = Vec::new();
        let mut outputs = Vec::new();
        for (x, l) in inputs.iter().zip(labels) {
            let t = forward_ode(x, c, g).unwrap();
            let y = softmax(&readout_endstate(t.end_state(), ro).unwrap()).unwrap();
            let mut tg = vec![0.0; 2];
            tg[*l] = 1.0;
            targets.extend(tg);
            outputs.extend(y);
        }
        cross_entropy(&targets, &outputs, 2).unwrap()
    }

    #[test]
    fn small_instance_matches_finite_differences() {
        let steps = 5;
        let g = TimeGrid::new(0.0, 0.1, steps, None).unwrap();
        let mut rng = SeededRng::new(11);
        let mut c = OdeControls::identity(2, steps);
        c.values.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        let ro = EndState {
            n_classes: 2,
            dim: 2,
            omega: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            bias: vec![0.1, -0.2],
        };
        let inputs = [[0.5, -0.3], [-0.2, 0.8], [0.9, 0.1]];
        let labels = [0usize, 1, 1];
        let mut grad = vec![0.0; c.values.len()];
        for (x, l) in inputs.iter().zip(&labels) {
            let t = forward_ode(x, &c, &g).unwrap();
            let mut tg = vec![0.0; 2];
            tg[*l] = 1.0;
            let (p_end, y) = adjoint_end_condition(t.end_state(), &ro, &tg, inputs.len()).unwrap();
            assert!(sample_cross_entropy(&tg, &y).unwrap().is_finite());
            let adj = backward_adjoint_ode(&t, &c, &p_end, &g, GradientMode::Discrete).unwrap();
            accumulate_control_gradient_ode(&adj, &t, &c, g.dt, &mut grad).unwrap();
        }
        let h = 1e-5;
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in 0..c.values.len() {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp.values[idx] += h;
            cm.values[idx] -= h;
            let fd = (loss(&inputs, &labels, &cp, &ro, &g) - loss(&inputs, &labels, &cm, &ro, &g)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-4 * scale, "entry {idx}: {fd} vs {}", grad[idx]);
        }
    }
}
