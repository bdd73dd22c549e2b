//! Optoelectronic delay oscillator with a band-pass filter and a `cos^2`
//! modulator nonlinearity, driven by two control signals `u1(t)`, `u2(t)`:
//!
//! ```text
//! tau_L dxi/dt = -(1 + tau_L/tau_H) xi - eta + beta cos^2(u1 xi(t - tau) + u2)
//! tau_H deta/dt = xi
//! ```
//!
//! Times are in microseconds. Besides the generic [`DelayModel`] impl this
//! module carries a hand-specialised adjoint sweep written directly in terms
//! of `g`, `g_H`, `g_L`, `beta~` and `delta = 2 (u1 xi_tau + u2)`; it must
//! agree with the generic sweep.

use std::f64::consts::FRAC_PI_4;

use crate::delay::{ControlSchedule, DelayModel, DelayTrajectory};
use crate::error::{check_len, Error, Result};
use crate::numerics::{trapezoid_weights, TimeGrid};
use crate::ode::{AdjointTrajectory, GradientMode};
use crate::readout::TimeResolved;

/// Initial control values `u1 = 1`, `u2 = -pi/4`.
pub const INITIAL_U1: f64 = 1.0;
pub const INITIAL_U2: f64 = -FRAC_PI_4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OeoParams {
    /// High-pass time constant (us).
    pub tau_h: f64,
    /// Low-pass time constant (us).
    pub tau_l: f64,
    /// Delay (us).
    pub tau: f64,
    /// Feedback strength.
    pub beta: f64,
}

impl Default for OeoParams {
    fn default() -> Self {
        Self {
            tau_h: 1590.0,
            tau_l: 15.9,
            tau: 230.0,
            beta: 3.0,
        }
    }
}

impl OeoParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_h", self.tau_h), ("tau_l", self.tau_l), ("tau", self.tau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn g(&self) -> f64 {
        1.0 / self.tau_h + 1.0 / self.tau_l
    }
    #[inline]
    pub fn g_h(&self) -> f64 {
        1.0 / self.tau_h
    }
    #[inline]
    pub fn g_l(&self) -> f64 {
        1.0 / self.tau_l
    }
    #[inline]
    pub fn beta_tilde(&self) -> f64 {
        self.beta / self.tau_l
    }
}

/// `delta = 2 (u1 xi_tau + u2)`.
#[inline]
pub fn feedback_phase(u1: f64, u2: f64, xi_delayed: f64) -> f64 {
    2.0 * (u1 * xi_delayed + u2)
}

/// `(dxi/dt, deta/dt)`.
#[inline]
pub fn oeo_derivative(xi: f64, eta: f64, xi_delayed: f64, u1: f64, u2: f64, p: &OeoParams) -> (f64, f64) {
    let c = (u1 * xi_delayed + u2).cos();
    (
        (-(1.0 + p.tau_l / p.tau_h) * xi - eta + p.beta * c * c) / p.tau_l,
        xi / p.tau_h,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OeoJacobians {
    /// `dF/d(xi, eta)`, row-major 2x2.
    pub state: [f64; 4],
    /// `dF/d(xi_tau, eta_tau)`.
    pub delayed: [f64; 4],
    /// `dF/d(u1, u2)`.
    pub control: [f64; 4],
}

#[inline]
pub fn oeo_jacobians(xi_delayed: f64, u1: f64, u2: f64, p: &OeoParams) -> OeoJacobians {
    let bt = p.beta_tilde();
    let s = feedback_phase(u1, u2, xi_delayed).sin();
    OeoJacobians {
        state: [-p.g(), -p.g_l(), p.g_h(), 0.0],
        delayed: [-bt * u1 * s, 0.0, 0.0, 0.0],
        control: [-bt * s * xi_delayed, -bt * s, 0.0, 0.0],
    }
}

/// Per-sample `(dJ/du1, dJ/du2)` densities: `-beta~ p_xi sin(delta) xi_tau`
/// and `-beta~ p_xi sin(delta)`.
#[inline]
pub fn oeo_control_gradient_terms(p_xi: f64, delta: f64, xi_delayed: f64, p: &OeoParams) -> (f64, f64) {
    let common = -p.beta_tilde() * p_xi * delta.sin();
    (common * xi_delayed, common)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OeoModel {
    pub params: OeoParams,
}

const XI_ONLY: [usize; 1] = [0];

impl OeoModel {
    pub fn new(params: OeoParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn initial_controls(n_steps: usize) -> ControlSchedule {
        ControlSchedule::constant(&[INITIAL_U1, INITIAL_U2], n_steps)
    }
}

impl DelayModel for OeoModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn readout_components(&self) -> &[usize] {
        &XI_ONLY
    }

    #[inline]
    fn rhs(&self, r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
        let (a, b) = oeo_derivative(r[0], r[1], rd[0], u[0], u[1], &self.params);
        out[0] = a;
        out[1] = b;
    }

    fn jac_state(&self, _r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&oeo_jacobians(rd[0], u[0], u[1], &self.params).state);
    }

    fn jac_delayed(&self, _r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&oeo_jacobians(rd[0], u[0], u[1], &self.params).delayed);
    }

    fn jac_control(&self, _r: &[f64], rd: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&oeo_jacobians(rd[0], u[0], u[1], &self.params).control);
    }

    #[inline]
    fn jacobians(
        &self,
        _r: &[f64],
        rd: &[f64],
        u: &[f64],
        state: &mut [f64],
        delayed: &mut [f64],
        control: &mut [f64],
    ) {
        let j = oeo_jacobians(rd[0], u[0], u[1], &self.params);
        state.copy_from_slice(&j.state);
        delayed.copy_from_slice(&j.delayed);
        control.copy_from_slice(&j.control);
    }
}

/// Adjoint sweep written out with the explicit oscillator coefficients.
///
/// `omega` is the readout on `xi` over the final interval and `residual` the
/// per-sample `dJ/dz`.
pub fn closed_form_adjoint(
    traj: &DelayTrajectory,
    controls: &ControlSchedule,
    params: &OeoParams,
    omega: &TimeResolved,
    residual: &[f64],
    grid: &TimeGrid,
    mode: GradientMode,
) -> Result<AdjointTrajectory> {
    let m = traj.m_tau;
    let n = traj.n_steps;
    check_len("closed_form_adjoint steps", n, grid.n_steps)?;
    check_len("closed_form_adjoint controls", 2 * n, controls.values.len())?;
    check_len("closed_form_adjoint readout dim", 1, omega.dim)?;
    check_len("closed_form_adjoint readout samples", m + 1, omega.n_samples)?;
    check_len("closed_form_adjoint residual", omega.n_classes, residual.len())?;
    let dt = grid.dt;
    let (g, g_h, g_l, bt) = (params.g(), params.g_h(), params.g_l(), params.beta_tilde());
    let w = trapezoid_weights(m + 1, dt)?;
    let tail_start = n - m;
    let source = |i: usize| -> f64 {
        if i < tail_start {
            return 0.0;
        }
        let j = i - tail_start;
        let om = omega.omega_at(j);
        w[j] * residual.iter().zip(om).map(|(r, o)| r * o).sum::<f64>()
    };
    let xi_delayed = |i: usize| traj.global(i)[0];
    let u1 = |i: usize| controls.values[2 * i];
    let u2 = |i: usize| controls.values[2 * i + 1];
    // beta~ u1(s) sin(delta(s)) for the step s that reads post-zero state s - m
    let delayed_gain = |s: usize| bt * u1(s) * feedback_phase(u1(s), u2(s), xi_delayed(s)).sin();

    let mut p_xi = vec![0.0; n + 1];
    let mut p_eta = vec![0.0; n + 1];
    match mode {
        GradientMode::Continuous => {
            for i in (0..n).rev() {
                let k = i + 1;
                let mut dxi = g * p_xi[k] - g_h * p_eta[k];
                if i + m < n {
                    dxi += delayed_gain(i + m) * p_xi[i + m];
                }
                p_xi[i] = p_xi[k] + source(i) - dt * dxi;
                p_eta[i] = p_eta[k] - dt * g_l * p_xi[k];
            }
        }
        GradientMode::Discrete => {
            p_xi[n] = source(n);
            for i in (0..n).rev() {
                let k = i + 1;
                let mut dxi = g * p_xi[k] - g_h * p_eta[k];
                if i + m < n {
                    dxi += delayed_gain(i + m) * p_xi[i + m + 1];
                }
                p_xi[i] = p_xi[k] + source(i) - dt * dxi;
                p_eta[i] = p_eta[k] - dt * g_l * p_xi[k];
            }
        }
    }
    let mut costates = Vec::with_capacity(2 * (n + 1));
    for (a, b) in p_xi.iter().zip(&p_eta) {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("closed-form adjoint".into()));
        }
        costates.push(*a);
        costates.push(*b);
    }
    Ok(AdjointTrajectory {
        dim: 2,
        mode,
        costates,
    })
}

/// Adds `scale * (dJ/du1, dJ/du2)` for one sample, using the explicit
/// `sin(delta)` expressions.
pub fn closed_form_control_gradient(
    adjoint: &AdjointTrajectory,
    traj: &DelayTrajectory,
    controls: &ControlSchedule,
    params: &OeoParams,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    check_len("closed_form_control_gradient buffer", controls.values.len(), out.len())?;
    for i in 0..controls.n_steps {
        let u = controls.at(i);
        let xd = traj.delayed_for_step(i)[0];
        let delta = feedback_phase(u[0], u[1], xd);
        let (g1, g2) = oeo_control_gradient_terms(adjoint.multiplier(i)[0], delta, xd, params);
        out[2 * i] += scale * g1;
        out[2 * i + 1] += scale * g2;
    }
    Ok(())
}
