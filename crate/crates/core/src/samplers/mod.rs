//! MCMC transition kernels written as transition systems over fixed noise.
//!
//! Each kernel's forward map applies the hard accept/reject gate, so traces
//! are exact samples. Its JVP differentiates a logistic relaxation of the
//! gate instead (stop-gradient trick), which gives the solvers a usable
//! Jacobian without changing the forward values.

mod gibbs;
mod hmc;
mod mala;

pub use gibbs::{
    conditional_logpdf, gibbs_jvp, gibbs_sweep, log_joint, Coordinate, EightSchoolsData, GibbsHyper, GibbsKernel,
};
pub use hmc::{
    hamiltonian, hmc_chain_system, hmc_step, leapfrog_block_jacobian, leapfrog_step, HmcKernel, HmcOutcome,
    LeapfrogMode, LeapfrogSystem,
};
pub use mala::{mala_jvp, mala_step, MalaKernel, MalaProposal};

use crate::sequence::{InitialState, StateSequence};
use crate::system::TransitionSystem;

/// A kernel whose step either accepts a proposal or keeps the current state.
pub trait GatedKernel: TransitionSystem {
    /// Whether step `t` taken from `prev` accepts.
    fn accepts(&self, t: usize, prev: &[f64]) -> bool;
}

/// Accept decisions implied by `trace`, each recomputed from its predecessor.
pub fn accept_decisions<K: GatedKernel + ?Sized>(kernel: &K, s0: &InitialState, trace: &StateSequence) -> Vec<bool> {
    use rayon::prelude::*;
    (0..trace.len())
        .into_par_iter()
        .map(|t| {
            let prev = if t == 0 { s0.as_slice() } else { trace.step(t - 1) };
            kernel.accepts(t, prev)
        })
        .collect()
}

/// `σ'(z) = σ(z) σ(-z)`, finite for every `z`.
pub fn sigmoid_prime(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Gate logit `min(0, Δ) - log u`; the step accepts iff it is positive.
pub(crate) fn gate_logit(delta: f64, u: f64) -> f64 {
    delta.min(0.0) - u.ln()
}

/// `σ'(g̃)` where the relaxed gate depends on `Δ`, zero where `min(0, Δ)` is flat.
pub(crate) fn gate_slope(delta: f64, logit: f64) -> f64 {
    if delta < 0.0 {
        sigmoid_prime(logit)
    } else {
        0.0
    }
}
