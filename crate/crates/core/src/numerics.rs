//! Time grids, explicit Euler stepping, trapezoidal quadrature and the
//! seeded random streams shared by every model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};

/// Uniform time grid built from integer step counts.
///
/// Sample times are always `t_start + i * dt`; the end time is derived the
/// same way so that `t_end` is bit-identical to `time(n_steps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Steps per delay interval, for delay-aligned grids.
    pub m_tau: Option<usize>,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize, m_tau: Option<usize>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !t_start.is_finite() {
            return Err(Error::Config("grid start must be finite".into()));
        }
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if let Some(m) = m_tau {
            if m == 0 {
                return Err(Error::Config("m_tau must be at least 1".into()));
            }
            if !n_steps.is_multiple_of(m) {
                return Err(Error::Config(format!(
                    "n_steps = {n_steps} is not a multiple of m_tau = {m}"
                )));
            }
        }
        Ok(Self {
            t_start,
            dt,
            n_steps,
            m_tau,
        })
    }

    /// Delay-aligned grid on `[0, n_delays * tau]` with `dt = tau / m_tau`.
    pub fn delay_aligned(tau: f64, m_tau: usize, n_delays: usize) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("delay must be positive, got {tau}")));
        }
        if m_tau == 0 || n_delays == 0 {
            return Err(Error::Config(format!(
                "m_tau = {m_tau} and t_over_tau = {n_delays} must both be positive"
            )));
        }
        Self::new(0.0, tau / m_tau as f64, m_tau * n_delays, Some(m_tau))
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t_start + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Delay `tau = m_tau * dt`, if the grid is delay-aligned.
    pub fn tau(&self) -> Option<f64> {
        self.m_tau.map(|m| m as f64 * self.dt)
    }

    pub fn n_delays(&self) -> Option<usize> {
        self.m_tau.map(|m| self.n_steps / m)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.time(i))
    }

    /// Same time span with every step split into `factor` sub-steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("refinement factor must be positive".into()));
        }
        Self::new(
            self.t_start,
            self.dt / factor as f64,
            self.n_steps * factor,
            self.m_tau.map(|m| m * factor),
        )
    }
}

/// `state + dt * derivative`. Negative `dt` steps backwards in time.
pub fn euler_step(state: &[f64], derivative: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_len("euler_step", state.len(), derivative.len())?;
    Ok(state
        .iter()
        .zip(derivative)
        .map(|(s, d)| s + dt * d)
        .collect())
}

/// Trapezoid weights for `n` samples spaced `dt` apart.
pub fn trapezoid_weights(n: usize, dt: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "trapezoid rule needs at least 2 samples, got {n}"
        )));
    }
    let mut w = vec![dt; n];
    w[0] = 0.5 * dt;
    w[n - 1] = 0.5 * dt;
    Ok(w)
}

/// Trapezoidal integral of uniformly spaced scalar samples.
pub fn trapezoid_integrate(samples: &[f64], dt: f64) -> Result<f64> {
    let w = trapezoid_weights(samples.len(), dt)?;
    Ok(samples.iter().zip(&w).map(|(f, w)| f * w).sum())
}

/// Trapezoidal integral of a vector-valued series stored row-major
/// (`samples.len() = n * dim`).
pub fn trapezoid_integrate_vec(samples: &[f64], dim: usize, dt: f64) -> Result<Vec<f64>> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::Shape {
            context: "trapezoid_integrate_vec",
            expected: dim,
            actual: samples.len(),
        });
    }
    let w = trapezoid_weights(samples.len() / dim, dt)?;
    let mut out = vec![0.0; dim];
    for (row, wi) in samples.chunks_exact(dim).zip(&w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// Reproducible random stream. The generator is ChaCha8, which yields the
/// same sequence on every platform for a given seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for worker / sub-task `index`.
    pub fn child(&self, index: u64) -> Self {
        Self::new(derive_seed(self.seed, index))
    }
}

impl rand::RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finaliser over `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
