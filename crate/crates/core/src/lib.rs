//! Supervised learning by optimal control of ODE and delay systems.
//!
//! Training signals are time-dependent control inputs of a dynamical system
//! plus a softmax readout. Gradients come from the adjoint method, for
//! ordinary differential equations and for delay differential equations
//! with the method of steps.

pub mod analysis;
pub mod data;
pub mod delay;
pub mod error;
pub mod exec;
pub mod numerics;
pub mod ode;
pub mod oeo;
pub mod optimizer;
pub mod readout;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::{ExecMode, Executor};
pub use numerics::{SeededRng, TimeGrid};
