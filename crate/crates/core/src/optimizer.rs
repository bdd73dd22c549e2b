//! Adam and plain gradient descent over named parameter groups.

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            hyper,
        }
    }
}

fn ensure_finite_grads(group: &str, grads: &[f64]) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("gradient of group '{group}' (entry {i})"))),
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(group: &str, params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    check_len("adam_step gradients", params.len(), grads.len())?;
    check_len("adam_step moments", params.len(), state.m.len())?;
    check_len("adam_step moments", params.len(), state.v.len())?;
    ensure_finite_grads(group, grads)?;
    let AdamHyper {
        alpha,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= alpha * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

pub fn sgd_step(group: &str, params: &mut [f64], grads: &[f64], alpha: f64) -> Result<()> {
    check_len("sgd_step gradients", params.len(), grads.len())?;
    ensure_finite_grads(group, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= alpha * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (adam | sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

/// Per-group optimizer state. A group with `alpha = 0` under SGD, or one
/// marked frozen, is left bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOptimizer {
    pub kind: OptimizerKind,
    pub names: Vec<String>,
    pub states: Vec<AdamState>,
    pub frozen: Vec<bool>,
}

impl GroupOptimizer {
    pub fn new(kind: OptimizerKind, groups: &[(&str, usize, AdamHyper)]) -> Result<Self> {
        for (_, _, h) in groups {
            h.validate()?;
        }
        Ok(Self {
            kind,
            names: groups.iter().map(|g| g.0.to_string()).collect(),
            states: groups.iter().map(|&(_, n, h)| AdamState::new(n, h)).collect(),
            frozen: vec![false; groups.len()],
        })
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_len("optimizer parameter groups", self.states.len(), params.len())?;
        check_len("optimizer gradient groups", self.states.len(), grads.len())?;
        for (g, name) in self.names.iter().enumerate() {
            ensure_finite_grads(name, grads[g])?;
        }
        for g in 0..self.states.len() {
            if self.frozen[g] {
                continue;
            }
            match self.kind {
                OptimizerKind::Adam => adam_step(&self.names[g], params[g], grads[g], &mut self.states[g])?,
                OptimizerKind::Sgd => {
                    let alpha = self.states[g].hyper.alpha;
                    sgd_step(&self.names[g], params[g], grads[g], alpha)?;
                    self.states[g].step_count += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut s = AdamState::new(3, AdamHyper::default());
        adam_step("u", &mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_and_second_steps_move_by_alpha() {
        let h = AdamHyper::with_alpha(0.01);
        let mut p = vec![1.0, 1.0];
        let g = [0.5, -3.0];
        let mut s = AdamState::new(2, h);
        adam_step("u", &mut p, &g, &mut s).unwrap();
        assert_relative_eq!(p[0], 0.99, epsilon = 1e-9);
        assert_relative_eq!(p[1], 1.01, epsilon = 1e-9);

        // hand-iterated second step
        let (b1, b2) = (h.beta1, h.beta2);
        let m1 = (1.0 - b1) * 0.5;
        let v1 = (1.0 - b2) * 0.25;
        let m2 = b1 * m1 + (1.0 - b1) * 0.5;
        let v2 = b2 * v1 + (1.0 - b2) * 0.25;
        let disp = 0.01 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + h.epsilon);
        let before = p[0];
        adam_step("u", &mut p, &g, &mut s).unwrap();
        assert_relative_eq!(before - p[0], disp, epsilon = 1e-15);
        assert_relative_eq!(before - p[0], 0.01, epsilon = 1e-8);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        sgd_step("u", &mut p, &[2.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0]);
        sgd_step("u", &mut p, &[2.0], 0.1).unwrap();
        assert_relative_eq!(p[0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn errors() {
        let mut s = AdamState::new(2, AdamHyper::default());
        let mut p = vec![0.0; 2];
        assert!(matches!(adam_step("u", &mut p, &[1.0], &mut s), Err(Error::Shape { .. })));
        let e = adam_step("omega", &mut p, &[1.0, f64::NAN], &mut s).unwrap_err();
        assert!(e.to_string().contains("omega"));
        assert!(sgd_step("b", &mut p, &[1.0], 0.1).is_err());
    }

    #[test]
    fn frozen_group_is_untouched() {
        let h = AdamHyper::default();
        let mut opt = GroupOptimizer::new(OptimizerKind::Adam, &[("u", 2, h), ("omega", 1, h)]).unwrap();
        opt.frozen[1] = true;
        let mut u = vec![0.1, 0.2];
        let mut w = vec![0.7];
        opt.step(&mut [&mut u, &mut w], &[&[1.0, 1.0], &[5.0]]).unwrap();
        assert_eq!(w[0].to_bits(), 0.7f64.to_bits());
        assert!(u[0] < 0.1);
        let e = opt.step(&mut [&mut u, &mut w], &[&[1.0, 1.0], &[f64::INFINITY]]).unwrap_err();
        assert!(e.to_string().contains("omega"));
    }

    proptest! {
        #[test]
        fn first_step_is_scale_invariant(g in -10.0f64..10.0, scale in 0.01f64..100.0) {
            prop_assume!(g.abs() > 1e-3);
            let run = |g: f64| {
                let mut p = vec![0.0];
                let mut s = AdamState::new(1, AdamHyper::default());
                adam_step("u", &mut p, &[g], &mut s).unwrap();
                p[0]
            };
            prop_assert!((run(g) - run(g * scale)).abs() < 1e-7);
        }

        #[test]
        fn adam_and_sgd_agree_in_sign(g in -10.0f64..10.0) {
            prop_assume!(g != 0.0);
            let mut a = vec![0.0];
            let mut s = AdamState::new(1, AdamHyper::default());
            adam_step("u", &mut a, &[g], &mut s).unwrap();
            let mut b = vec![0.0];
            sgd_step("u", &mut b, &[g], 0.1).unwrap();
            prop_assert_eq!(a[0].signum(), b[0].signum());
        }
    }
}
