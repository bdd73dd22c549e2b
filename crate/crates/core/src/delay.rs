//! Delay systems `dr/dt = F(r(t), r(t - tau), u(t))` integrated by the method
//! of steps on a delay-aligned grid, with the matching adjoint sweep and the
//! control and readout gradients.
//!
//! Indexing: the trajectory holds the history on `[-tau, 0]` followed by the
//! solution on `(0, T]`, so global index `g` is time `-tau + g * dt`. Step
//! `i` (control sample `u_i`) advances global index `m_tau + i`, reading the
//! delayed state at global index `i`. Adjoints use post-zero indices
//! `0..=n_steps`.

use crate::error::{check_len, Error, Result};
use crate::numerics::{trapezoid_weights, TimeGrid};
use crate::ode::{AdjointTrajectory, GradientMode};
use crate::readout::TimeResolved;

/// Default magnitude above which a trajectory is declared divergent.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

/// Right-hand side of a delay system and its Jacobians.
///
/// Jacobians are written row-major: `jac_state[i * n + j] = dF_i / dr_j`,
/// `jac_control[i * n_u + j] = dF_i / du_j`.
pub trait DelayModel: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// State components seen by the time-resolved readout.
    fn readout_components(&self) -> &[usize];

    fn rhs(&self, r: &[f64], r_delayed: &[f64], u: &[f64], out: &mut [f64]);
    fn jac_state(&self, r: &[f64], r_delayed: &[f64], u: &[f64], out: &mut [f64]);
    fn jac_delayed(&self, r: &[f64], r_delayed: &[f64], u: &[f64], out: &mut [f64]);
    fn jac_control(&self, r: &[f64], r_delayed: &[f64], u: &[f64], out: &mut [f64]);

    /// All three Jacobians at one point. Override when they share work.
    fn jacobians(
        &self,
        r: &[f64],
        r_delayed: &[f64],
        u: &[f64],
        state: &mut [f64],
        delayed: &mut [f64],
        control: &mut [f64],
    ) {
        self.jac_state(r, r_delayed, u, state);
        self.jac_delayed(r, r_delayed, u, delayed);
        self.jac_control(r, r_delayed, u, control);
    }
}

/// Initial function on `[-tau, 0]`: `m_tau + 1` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayHistory {
    pub dim: usize,
    pub m_tau: usize,
    pub samples: Vec<f64>,
}

impl DelayHistory {
    pub fn constant(value: &[f64], m_tau: usize) -> Self {
        let mut samples = Vec::with_capacity((m_tau + 1) * value.len());
        for _ in 0..=m_tau {
            samples.extend_from_slice(value);
        }
        Self {
            dim: value.len(),
            m_tau,
            samples,
        }
    }

    pub fn sample(&self, j: usize) -> &[f64] {
        &self.samples[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        check_len("DelayHistory samples", (self.m_tau + 1) * self.dim, self.samples.len())?;
        if self.samples.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("delay history".into()))
        }
    }
}

/// Piecewise-constant vector control, one sample per grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub dim: usize,
    pub n_steps: usize,
    pub values: Vec<f64>,
}

impl ControlSchedule {
    pub fn constant(value: &[f64], n_steps: usize) -> Self {
        let mut values = Vec::with_capacity(n_steps * value.len());
        for _ in 0..n_steps {
            values.extend_from_slice(value);
        }
        Self {
            dim: value.len(),
            n_steps,
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayTrajectory {
    pub dim: usize,
    pub m_tau: usize,
    pub n_steps: usize,
    /// `(m_tau + n_steps + 1) x dim`, starting at `t = -tau`.
    pub states: Vec<f64>,
}

impl DelayTrajectory {
    /// State at global index `g` (time `-tau + g * dt`).
    #[inline]
    pub fn global(&self, g: usize) -> &[f64] {
        &self.states[g * self.dim..(g + 1) * self.dim]
    }

    /// State at post-zero index `i` (time `i * dt`).
    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        self.global(self.m_tau + i)
    }

    /// State read as the delayed argument by step `i`.
    #[inline]
    pub fn delayed_for_step(&self, i: usize) -> &[f64] {
        self.global(i)
    }

    /// Observed components on `[T - tau, T]`, row-major `(m_tau + 1) x n_obs`.
    pub fn tail(&self, components: &[usize]) -> Vec<f64> {
        let start = self.n_steps;
        let mut out = Vec::with_capacity((self.m_tau + 1) * components.len());
        for i in start..=self.n_steps + self.m_tau {
            let s = self.global(i);
            out.extend(components.iter().map(|&c| s[c]));
        }
        out
    }
}

fn check_setup(
    model: &impl DelayModel,
    controls: &ControlSchedule,
    grid: &TimeGrid,
) -> Result<usize> {
    let m = grid
        .m_tau
        .ok_or_else(|| Error::Config("delay models need a delay-aligned grid".into()))?;
    if grid.n_steps < m {
        return Err(Error::Config(format!(
            "end time must cover at least one delay interval (n_steps = {}, m_tau = {m})",
            grid.n_steps
        )));
    }
    check_len("ControlSchedule steps", grid.n_steps, controls.n_steps)?;
    check_len("ControlSchedule dim", model.control_dim(), controls.dim)?;
    check_len(
        "ControlSchedule values",
        controls.n_steps * controls.dim,
        controls.values.len(),
    )?;
    Ok(m)
}

pub fn forward_delay(
    history: &DelayHistory,
    controls: &ControlSchedule,
    model: &impl DelayModel,
    grid: &TimeGrid,
    bound: f64,
) -> Result<DelayTrajectory> {
    let m = check_setup(model, controls, grid)?;
    let dim = model.state_dim();
    check_len("DelayHistory dim", dim, history.dim)?;
    check_len("DelayHistory m_tau", m, history.m_tau)?;
    check_len("DelayHistory samples", (m + 1) * dim, history.samples.len())?;
    let n = grid.n_steps;
    let mut states = vec![0.0; (m + n + 1) * dim];
    states[..(m + 1) * dim].copy_from_slice(&history.samples);
    let mut deriv = vec![0.0; dim];
    for i in 0..n {
        let g = m + i;
        let (done, rest) = states.split_at_mut((g + 1) * dim);
        let cur = &done[g * dim..];
        let delayed = &done[i * dim..(i + 1) * dim];
        model.rhs(cur, delayed, controls.at(i), &mut deriv);
        let next = &mut rest[..dim];
        let mut worst = 0.0f64;
        for ((nx, c), d) in next.iter_mut().zip(cur).zip(&deriv) {
            *nx = c + grid.dt * d;
            worst = worst.max(nx.abs());
            if !nx.is_finite() {
                worst = f64::INFINITY;
            }
        }
        if worst > bound {
            return Err(Error::Divergence {
                step: i + 1,
                time: grid.time(i + 1),
                magnitude: worst,
            });
        }
    }
    Ok(DelayTrajectory {
        dim,
        m_tau: m,
        n_steps: n,
        states,
    })
}

/// Readout source `w_j * sum_l residual_l omega_l(t_j)` scattered onto the
/// observed state components, for final-interval sample `j`.
fn readout_source(
    readout: &TimeResolved,
    components: &[usize],
    residual: &[f64],
    weight: f64,
    j: usize,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let om = readout.omega_at(j);
    for (l, res) in residual.iter().enumerate() {
        let row = &om[l * readout.dim..(l + 1) * readout.dim];
        for (o, &c) in components.iter().enumerate() {
            out[c] += weight * res * row[o];
        }
    }
}

#[inline]
fn add_transpose_apply(jac: &[f64], q: &[f64], scale: f64, out: &mut [f64]) {
    let rows = q.len();
    let cols = out.len();
    for i in 0..rows {
        let v = scale * q[i];
        if v != 0.0 {
            for (o, a) in out.iter_mut().zip(&jac[i * cols..(i + 1) * cols]) {
                *o += a * v;
            }
        }
    }
}

/// Backward adjoint sweep for one sample.
///
/// `residual` is `dJ/dz` for this sample (already divided by the batch size).
/// In continuous mode `p(T) = 0`, the readout acts as a source on the final
/// interval (with the trapezoid weights of the forward quadrature) and the
/// delayed coupling reads `p(t + tau)` from the already-swept segment. Each
/// backward step takes the costate from `t_{i+1}` and the coefficients from
/// `t_i`.
pub fn backward_adjoint_delay(
    traj: &DelayTrajectory,
    controls: &ControlSchedule,
    model: &impl DelayModel,
    readout: &TimeResolved,
    residual: &[f64],
    grid: &TimeGrid,
    mode: GradientMode,
) -> Result<AdjointTrajectory> {
    let m = check_setup(model, controls, grid)?;
    let dim = model.state_dim();
    let n = grid.n_steps;
    let components = model.readout_components();
    check_len("backward_adjoint_delay residual", readout.n_classes, residual.len())?;
    check_len("backward_adjoint_delay readout samples", m + 1, readout.n_samples)?;
    check_len("backward_adjoint_delay readout dim", components.len(), readout.dim)?;
    check_len("backward_adjoint_delay trajectory", (m + n + 1) * dim, traj.states.len())?;

    let weights = trapezoid_weights(m + 1, grid.dt)?;
    let tail_start = n - m;
    let du = model.control_dim();
    let mut jac_a = vec![0.0; dim * dim];
    let mut jac_b = vec![0.0; dim * dim];
    let mut jac_c = vec![0.0; dim * du];
    let mut src = vec![0.0; dim];
    // delayed[i] = B^T q evaluated at post-zero point / step i
    let mut delayed = vec![0.0; (n + 1) * dim];
    let mut costates = vec![0.0; (n + 1) * dim];

    match mode {
        GradientMode::Discrete => {
            readout_source(readout, components, residual, weights[m], m, &mut src);
            costates[n * dim..].copy_from_slice(&src);
            for i in (0..n).rev() {
                let (head, tail) = costates.split_at_mut((i + 1) * dim);
                let later = &tail[..dim];
                let cur = &mut head[i * dim..];
                model.jacobians(
                    traj.at(i),
                    traj.delayed_for_step(i),
                    controls.at(i),
                    &mut jac_a,
                    &mut jac_b,
                    &mut jac_c,
                );
                let d = &mut delayed[i * dim..(i + 1) * dim];
                d.iter_mut().for_each(|v| *v = 0.0);
                add_transpose_apply(&jac_b, later, 1.0, d);

                cur.copy_from_slice(later);
                add_transpose_apply(&jac_a, later, grid.dt, cur);
                if i + m < n {
                    let dd = &delayed[(i + m) * dim..(i + m + 1) * dim];
                    cur.iter_mut().zip(dd).for_each(|(c, v)| *c += grid.dt * v);
                }
                if i >= tail_start {
                    let j = i - tail_start;
                    readout_source(readout, components, residual, weights[j], j, &mut src);
                    cur.iter_mut().zip(&src).for_each(|(c, s)| *c += s);
                }
                check_costate(cur, i, grid)?;
            }
        }
        GradientMode::Continuous => {
            for i in (0..n).rev() {
                let (head, tail) = costates.split_at_mut((i + 1) * dim);
                let later = &tail[..dim];
                let cur = &mut head[i * dim..];
                model.jacobians(
                    traj.at(i),
                    traj.delayed_for_step(i),
                    controls.at(i),
                    &mut jac_a,
                    &mut jac_b,
                    &mut jac_c,
                );
                cur.copy_from_slice(later);
                add_transpose_apply(&jac_a, later, grid.dt, cur);
                if i + m < n {
                    let dd = &delayed[(i + m) * dim..(i + m + 1) * dim];
                    cur.iter_mut().zip(dd).for_each(|(c, v)| *c += grid.dt * v);
                }
                if i >= tail_start {
                    let j = i - tail_start;
                    readout_source(readout, components, residual, weights[j], j, &mut src);
                    cur.iter_mut().zip(&src).for_each(|(c, s)| *c += s);
                }
                check_costate(cur, i, grid)?;
                let d = &mut delayed[i * dim..(i + 1) * dim];
                d.iter_mut().for_each(|v| *v = 0.0);
                add_transpose_apply(&jac_b, &costates[i * dim..(i + 1) * dim], 1.0, d);
            }
        }
    }
    Ok(AdjointTrajectory {
        dim,
        mode,
        costates,
    })
}

fn check_costate(p: &[f64], i: usize, grid: &TimeGrid) -> Result<()> {
    match p.iter().find(|v| !v.is_finite()) {
        Some(bad) => Err(Error::Divergence {
            step: i,
            time: grid.time(i),
            magnitude: bad.abs(),
        }),
        None => Ok(()),
    }
}

/// Adds `scale * (dF/du)^T q_i` for every step of one sample to `out`.
pub fn accumulate_control_gradient_delay(
    adjoint: &AdjointTrajectory,
    traj: &DelayTrajectory,
    controls: &ControlSchedule,
    model: &impl DelayModel,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let dim = model.state_dim();
    let du = model.control_dim();
    check_len("control gradient buffer", controls.values.len(), out.len())?;
    check_len("control gradient adjoint", (controls.n_steps + 1) * dim, adjoint.costates.len())?;
    let mut jac_c = vec![0.0; dim * du];
    for i in 0..controls.n_steps {
        model.jac_control(traj.at(i), traj.delayed_for_step(i), controls.at(i), &mut jac_c);
        add_transpose_apply(&jac_c, adjoint.multiplier(i), scale, &mut out[i * du..(i + 1) * du]);
    }
    Ok(())
}

/// Control gradient density `sum_k (p_k^T dF_k/du)^T` at every step.
/// Multiply by `dt` for the gradient with respect to the step values.
pub fn control_gradient_delay(
    adjoints: &[AdjointTrajectory],
    trajs: &[DelayTrajectory],
    controls: &ControlSchedule,
    model: &impl DelayModel,
) -> Result<Vec<f64>> {
    check_len("control_gradient_delay batch", adjoints.len(), trajs.len())?;
    let mut out = vec![0.0; controls.values.len()];
    for (adj, traj) in adjoints.iter().zip(trajs) {
        accumulate_control_gradient_delay(adj, traj, controls, model, 1.0, &mut out)?;
    }
    Ok(out)
}

/// Adds one sample's readout gradient: `omega_t[j] += scale * w_j * res (x) r(t_j)`
/// and `bias += res`. With `scale = 1` this is the exact gradient of the
/// trapezoid quadrature with respect to the weight samples.
pub fn accumulate_readout_gradient_delay(
    tail: &[f64],
    residual: &[f64],
    readout: &TimeResolved,
    dt: f64,
    scale: f64,
    out_omega: &mut [f64],
    out_bias: &mut [f64],
) -> Result<()> {
    check_len("readout gradient tail", readout.n_samples * readout.dim, tail.len())?;
    check_len("readout gradient residual", readout.n_classes, residual.len())?;
    check_len("readout gradient omega buffer", readout.omega_t.len(), out_omega.len())?;
    check_len("readout gradient bias buffer", readout.n_classes, out_bias.len())?;
    let w = trapezoid_weights(readout.n_samples, dt)?;
    let stride = readout.n_classes * readout.dim;
    for (j, r) in tail.chunks_exact(readout.dim).enumerate() {
        let g = &mut out_omega[j * stride..(j + 1) * stride];
        let wj = scale * w[j];
        for (l, res) in residual.iter().enumerate() {
            for (o, rv) in r.iter().enumerate() {
                g[l * readout.dim + o] += wj * res * rv;
            }
        }
    }
    out_bias.iter_mut().zip(residual).for_each(|(b, r)| *b += r);
    Ok(())
}

/// Readout gradient densities over a batch: `grad_omega_t(t_j)` carries the
/// trapezoid end weights (1/2 at both ends of the interval, 1 inside) and
/// `grad_b = sum_k residual_k`.
pub fn readout_gradient_delay(
    tails: &[Vec<f64>],
    residuals: &[Vec<f64>],
    readout: &TimeResolved,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("readout_gradient_delay batch", tails.len(), residuals.len())?;
    let mut omega = vec![0.0; readout.omega_t.len()];
    let mut bias = vec![0.0; readout.n_classes];
    for (tail, res) in tails.iter().zip(residuals) {
        accumulate_readout_gradient_delay(tail, res, readout, dt, 1.0 / dt, &mut omega, &mut bias)?;
    }
    Ok((omega, bias))
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::DelayModel;

    /// Scalar `F = a r + c r_tau + u` with constant coefficients.
    pub struct Linear {
        pub a: f64,
        pub c: f64,
        pub obs: [usize; 1],
    }

    impl DelayModel for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn readout_components(&self) -> &[usize] {
            &self.obs
        }
        fn rhs(&self, r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = self.a * r[0] + self.c * rd[0] + u[0];
        }
        fn jac_state(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = self.a;
        }
        fn jac_delayed(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = self.c;
        }
        fn jac_control(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
    }

    /// Two-component nonlinear test system:
    /// `F_0 = -r_0 + sin(u_0 rd_1) + u_1 r_1`, `F_1 = r_0 rd_0 - 0.5 r_1 + tanh(u_1)`.
    pub struct Coupled {
        pub obs: [usize; 2],
    }

    impl DelayModel for Coupled {
        fn state_dim(&self) -> usize {
            2
        }
        fn control_dim(&self) -> usize {
            2
        }
        fn readout_components(&self) -> &[usize] {
            &self.obs
        }
        fn rhs(&self, r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = -r[0] + (u[0] * rd[1]).sin() + u[1] * r[1];
            out[1] = r[0] * rd[0] - 0.5 * r[1] + u[1].tanh();
        }
        fn jac_state(&self, _r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[-1.0, u[1], rd[0], -0.5]);
        }
        fn jac_delayed(&self, r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[0.0, u[0] * (u[0] * rd[1]).cos(), r[0], 0.0]);
        }
        fn jac_control(&self, r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
            let th = u[1].tanh();
            out.copy_from_slice(&[rd[1] * (u[0] * rd[1]).cos(), r[1], 0.0, 1.0 - th * th]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::{Coupled, Linear};
    use super::*;
    use crate::numerics::SeededRng;
    use crate::readout::{readout_timeresolved, sample_cross_entropy, sample_residual, softmax};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn grid(m: usize, n_delays: usize, tau: f64) -> TimeGrid {
        TimeGrid::delay_aligned(tau, m, n_delays).unwrap()
    }

    #[test]
    fn zero_rhs_freezes_state() {
        let model = Linear { a: 0.0, c: 0.0, obs: [0] };
        let g = grid(4, 3, 1.0);
        let mut h = DelayHistory::constant(&[0.0], 4);
        h.samples = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, DEFAULT_DIVERGENCE_BOUND).unwrap();
        for i in 0..=g.n_steps {
            assert_eq!(t.at(i), &[0.5]);
        }
    }

    #[test]
    fn linear_decay_is_geometric() {
        let model = Linear { a: -1.0, c: 0.0, obs: [0] };
        let g = grid(5, 4, 0.5);
        let h = DelayHistory::constant(&[1.0], 5);
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, DEFAULT_DIVERGENCE_BOUND).unwrap();
        for i in 0..=g.n_steps {
            assert_relative_eq!(t.at(i)[0], (1.0 - g.dt).powi(i as i32), epsilon = 1e-14);
        }
    }

    #[test]
    fn pure_delay_fixed_point() {
        let model = Linear { a: -1.0, c: 1.0, obs: [0] };
        let g = grid(6, 5, 2.0);
        let h = DelayHistory::constant(&[0.7], 6);
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, DEFAULT_DIVERGENCE_BOUND).unwrap();
        assert!(t.states.iter().all(|v| (*v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn divergence_is_reported() {
        let model = Linear { a: 50.0, c: 0.0, obs: [0] };
        let g = grid(10, 10, 1.0);
        let h = DelayHistory::constant(&[1.0], 10);
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        match forward_delay(&h, &c, &model, &g, 1e6) {
            Err(Error::Divergence { step, .. }) => assert!(step > 0 && step < 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_residual_gives_zero_adjoint() {
        let model = Coupled { obs: [0, 1] };
        let g = grid(4, 3, 1.0);
        let h = DelayHistory::constant(&[0.3, -0.2], 4);
        let c = ControlSchedule::constant(&[0.5, 0.1], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, 1e6).unwrap();
        let mut ro = TimeResolved::zeros(2, 2, 5);
        ro.omega_t.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64);
        for mode in [GradientMode::Continuous, GradientMode::Discrete] {
            let adj = backward_adjoint_delay(&t, &c, &model, &ro, &[0.0, 0.0], &g, mode).unwrap();
            assert!(adj.costates.iter().all(|v| *v == 0.0));
            let grad = control_gradient_delay(&[adj], std::slice::from_ref(&t), &c, &model).unwrap();
            assert!(grad.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn source_only_adjoint_is_a_ramp() {
        // F = 0: p(t) = rho w (T - t) on the last interval, then constant.
        let model = Linear { a: 0.0, c: 0.0, obs: [0] };
        let m = 8;
        let tau = 2.0;
        let g = grid(m, 3, tau);
        let h = DelayHistory::constant(&[1.0], m);
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, 1e6).unwrap();
        let (rho, w) = (0.3, -1.7);
        let mut ro = TimeResolved::zeros(1, 1, m + 1);
        ro.omega_t.iter_mut().for_each(|v| *v = w);
        let adj = backward_adjoint_delay(&t, &c, &model, &ro, &[rho], &g, GradientMode::Continuous).unwrap();
        let n = g.n_steps;
        assert_eq!(adj.costate(n), &[0.0]);
        for i in (n - m + 1)..n {
            let exact = rho * w * (g.t_end() - g.time(i));
            assert_relative_eq!(adj.costate(i)[0], exact, epsilon = 1e-13);
        }
        // the trapezoid end weight at T - tau contributes half a step
        for i in 0..=(n - m) {
            assert_relative_eq!(adj.costate(i)[0], rho * w * (tau - 0.5 * g.dt), epsilon = 1e-13);
        }
        // discrete adjoint: dJ/dr_i is the quadrature weight times the source
        let adj = backward_adjoint_delay(&t, &c, &model, &ro, &[rho], &g, GradientMode::Discrete).unwrap();
        assert_relative_eq!(adj.costate(n)[0], rho * w * 0.5 * g.dt, epsilon = 1e-15);
        assert_relative_eq!(adj.costate(0)[0], rho * w * tau, epsilon = 1e-13);
    }

    #[test]
    fn pure_control_gradient_is_one() {
        let model = Linear { a: 0.0, c: 0.0, obs: [0] };
        let g = grid(2, 2, 1.0);
        let h = DelayHistory::constant(&[0.0], 2);
        let c = ControlSchedule::constant(&[0.0], g.n_steps);
        let t = forward_delay(&h, &c, &model, &g, 1e6).unwrap();
        let adj = AdjointTrajectory {
            dim: 1,
            mode: GradientMode::Continuous,
            costates: vec![1.0; g.n_steps + 1],
        };
        let grad = control_gradient_delay(&[adj], &[t], &c, &model).unwrap();
        assert!(grad.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn readout_gradient_hand_example() {
        let m = 4;
        let dt = 0.25;
        let ro = TimeResolved::zeros(1, 1, m + 1);
        let rho = 0.6;
        let (gw, gb) = readout_gradient_delay(&[vec![1.0; m + 1]], &[vec![rho]], &ro, dt).unwrap();
        assert_relative_eq!(gw[0], 0.5 * rho);
        assert_relative_eq!(gw[m], 0.5 * rho);
        for j in 1..m {
            assert_relative_eq!(gw[j], rho);
        }
        assert_eq!(gb, vec![rho]);
        let (gw, gb) = readout_gradient_delay(&[vec![1.0; m + 1]], &[vec![0.0]], &ro, dt).unwrap();
        assert!(gw.iter().chain(&gb).all(|v| *v == 0.0));
    }

    struct Instance {
        g: TimeGrid,
        h: DelayHistory,
        c: ControlSchedule,
        ro: TimeResolved,
        label: usize,
    }

    fn random_instance(seed: u64) -> Instance {
        let mut rng = SeededRng::new(seed);
        let m = 6;
        let g = grid(m, 3, 1.2);
        let mut h = DelayHistory::constant(&[0.0, 0.0], m);
        h.samples.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut c = ControlSchedule::constant(&[0.0, 0.0], g.n_steps);
        c.values.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
        let mut ro = TimeResolved::zeros(2, 2, m + 1);
        ro.omega_t.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        ro.bias = vec![0.2, -0.1];
        Instance { g, h, c, ro, label: (seed % 2) as usize }
    }

    fn loss(model: &Coupled, inst: &Instance, c: &ControlSchedule, ro: &TimeResolved) -> f64 {
        let t = forward_delay(&inst.h, c, model, &inst.g, 1e6).unwrap();
        let z = readout_timeresolved(&t.tail(model.readout_components()), ro, inst.g.dt).unwrap();
        let mut tg = vec![0.0; 2];
        tg[inst.label] = 1.0;
        sample_cross_entropy(&tg, &softmax(&z).unwrap()).unwrap()
    }

    #[test]
    fn discrete_gradients_match_finite_differences() {
        let model = Coupled { obs: [0, 1] };
        for seed in 0..5 {
            let inst = random_instance(seed);
            let t = forward_delay(&inst.h, &inst.c, &model, &inst.g, 1e6).unwrap();
            let tail = t.tail(model.readout_components());
            let z = readout_timeresolved(&tail, &inst.ro, inst.g.dt).unwrap();
            let mut tg = vec![0.0; 2];
            tg[inst.label] = 1.0;
            let res = sample_residual(&tg, &softmax(&z).unwrap(), 1).unwrap();
            let adj = backward_adjoint_delay(&t, &inst.c, &model, &inst.ro, &res, &inst.g, GradientMode::Discrete).unwrap();
            let mut gu = vec![0.0; inst.c.values.len()];
            accumulate_control_gradient_delay(&adj, &t, &inst.c, &model, inst.g.dt, &mut gu).unwrap();
            let mut gw = vec![0.0; inst.ro.omega_t.len()];
            let mut gb = vec![0.0; 2];
            accumulate_readout_gradient_delay(&tail, &res, &inst.ro, inst.g.dt, 1.0, &mut gw, &mut gb).unwrap();

            let h = 1e-6;
            let scale = gu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for idx in 0..gu.len() {
                let mut cp = inst.c.clone();
                let mut cm = inst.c.clone();
                cp.values[idx] += h;
                cm.values[idx] -= h;
                let fd = (loss(&model, &inst, &cp, &inst.ro) - loss(&model, &inst, &cm, &inst.ro)) / (2.0 * h);
                assert!((fd - gu[idx]).abs() <= 1e-7 * scale, "seed {seed} u[{idx}]: {fd} vs {}", gu[idx]);
            }
            let scale = gw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for idx in 0..gw.len() {
                let mut rp = inst.ro.clone();
                let mut rm = inst.ro.clone();
                rp.omega_t[idx] += h;
                rm.omega_t[idx] -= h;
                let fd = (loss(&model, &inst, &inst.c, &rp) - loss(&model, &inst, &inst.c, &rm)) / (2.0 * h);
                assert!((fd - gw[idx]).abs() <= 1e-7 * scale, "seed {seed} w[{idx}]");
            }
        }
    }

    #[test]
    fn control_perturbation_is_causal() {
        let model = Coupled { obs: [0, 1] };
        let inst = random_instance(3);
        let base = forward_delay(&inst.h, &inst.c, &model, &inst.g, 1e6).unwrap();
        let star = 7;
        let mut c = inst.c.clone();
        c.values[star * 2] += 0.1;
        let pert = forward_delay(&inst.h, &c, &model, &inst.g, 1e6).unwrap();
        for i in 0..=star {
            assert_eq!(base.at(i), pert.at(i));
        }
        assert_ne!(base.at(star + 1), pert.at(star + 1));
    }
}
