//! The transition-system abstraction shared by the sequential oracle and the
//! parallel solvers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{InitialState, StateSequence};

/// How a solver linearizes each transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Full `D x D` Jacobian (DEER).
    Dense,
    /// Hutchinson estimate of the Jacobian diagonal (stochastic quasi-DEER).
    DiagStochastic,
    /// Diagonal of each block of a 2x2-block Jacobian (block quasi-DEER).
    Block2x2Stochastic,
}

impl std::fmt::Display for JacobianMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JacobianMode::Dense => "dense",
            JacobianMode::DiagStochastic => "diag-stochastic",
            JacobianMode::Block2x2Stochastic => "block2x2-stochastic",
        })
    }
}

/// A sequence of maps `f_t : R^D -> R^D`, `t = 0..steps()`.
///
/// Step `t` maps `s_t` (with `s_0` the initial state) to `s_{t+1}`. All
/// randomness is fixed at construction so `step` is a pure function of
/// `(t, prev)`. Implementations must be safe to call from many workers.
pub trait TransitionSystem: Sync {
    fn dim(&self) -> usize;

    fn steps(&self) -> usize;

    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]);

    /// Jacobian-vector product of the (relaxed, differentiable) map at `prev`.
    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]);

    /// Forward value plus one JVP per tangent (`tangents` holds `n * dim` values).
    ///
    /// One call is one forward pass; systems override it to share work between
    /// the value and the tangents.
    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        self.step(t, prev, next);
        let d = self.dim();
        for (v, o) in tangents.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.jvp(t, prev, v, o);
        }
    }

    /// Row-major `D x D` Jacobian, assembled column-wise from JVPs by default.
    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.jvp(t, prev, &e, &mut col);
            e[j] = 0.0;
            for i in 0..d {
                out[i * d + j] = col[i];
            }
        }
    }

    /// Block-diagonal estimate for systems whose state is two halves `[x, v]`.
    ///
    /// `probes` holds `n` Rademacher vectors of length `dim/2`. Writes the four
    /// diagonal blocks `a, b, c, d` (each `dim/2` long) consecutively into
    /// `blocks`.
    fn block_jacobian(&self, _t: usize, _prev: &[f64], _probes: &[f64], _blocks: &mut [f64]) -> Result<()> {
        Err(Error::Structure("system has no 2x2 block Jacobian structure".into()))
    }

    fn supports(&self, mode: JacobianMode) -> bool {
        !matches!(mode, JacobianMode::Block2x2Stochastic)
    }
}

impl<S: TransitionSystem + ?Sized> TransitionSystem for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn steps(&self) -> usize {
        (**self).steps()
    }
    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        (**self).step(t, prev, next)
    }
    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        (**self).jvp(t, prev, tangent, out)
    }
    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        (**self).step_jvps(t, prev, tangents, next, out)
    }
    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        (**self).dense_jacobian(t, prev, out)
    }
    fn block_jacobian(&self, t: usize, prev: &[f64], probes: &[f64], blocks: &mut [f64]) -> Result<()> {
        (**self).block_jacobian(t, prev, probes, blocks)
    }
    fn supports(&self, mode: JacobianMode) -> bool {
        (**self).supports(mode)
    }
}

/// Evaluate `s_{t+1} = f_t(s_t)` in order. The ground truth for every solver.
pub fn sequential_evaluate<S: TransitionSystem + ?Sized>(system: &S, s0: &InitialState) -> Result<StateSequence> {
    let d = system.dim();
    if s0.dim() != d {
        return Err(Error::Structure(format!(
            "initial state has dimension {}, system has {d}",
            s0.dim()
        )));
    }
    let steps = system.steps();
    let mut out = StateSequence::zeros(steps, d)?;
    let mut prev = s0.as_slice().to_vec();
    for t in 0..steps {
        let next = out.step_mut(t);
        system.step(t, &prev, next);
        if let Some(i) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                t,
                detail: format!("component {i} became {}", next[i]),
            });
        }
        prev.copy_from_slice(next);
    }
    Ok(out)
}

/// Wraps a system and counts JVP evaluations per step.
pub struct JvpCounter<S> {
    inner: S,
    per_step: Vec<AtomicU64>,
    forward: AtomicU64,
}

impl<S: TransitionSystem> JvpCounter<S> {
    pub fn new(inner: S) -> Self {
        let per_step = (0..inner.steps()).map(|_| AtomicU64::new(0)).collect();
        Self {
            inner,
            per_step,
            forward: AtomicU64::new(0),
        }
    }

    pub fn jvps_at(&self, t: usize) -> u64 {
        self.per_step[t].load(Ordering::Relaxed)
    }

    pub fn total_jvps(&self) -> u64 {
        self.per_step.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    /// Number of forward passes (`step` or `step_jvps` calls).
    pub fn forward_passes(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in &self.per_step {
            c.store(0, Ordering::Relaxed);
        }
        self.forward.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: TransitionSystem> TransitionSystem for JvpCounter<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn steps(&self) -> usize {
        self.inner.steps()
    }
    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        self.forward.fetch_add(1, Ordering::Relaxed);
        self.inner.step(t, prev, next)
    }
    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        self.per_step[t].fetch_add(1, Ordering::Relaxed);
        self.inner.jvp(t, prev, tangent, out)
    }
    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        self.forward.fetch_add(1, Ordering::Relaxed);
        let n = tangents.len() / self.inner.dim();
        self.per_step[t].fetch_add(n as u64, Ordering::Relaxed);
        self.inner.step_jvps(t, prev, tangents, next, out)
    }
    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        self.per_step[t].fetch_add(self.inner.dim() as u64, Ordering::Relaxed);
        self.inner.dense_jacobian(t, prev, out)
    }
    fn block_jacobian(&self, t: usize, prev: &[f64], probes: &[f64], blocks: &mut [f64]) -> Result<()> {
        let n = probes.len() / (self.inner.dim() / 2).max(1);
        self.per_step[t].fetch_add(n as u64, Ordering::Relaxed);
        self.inner.block_jacobian(t, prev, probes, blocks)
    }
    fn supports(&self, mode: JacobianMode) -> bool {
        self.inner.supports(mode)
    }
}

/// A system given by closures; handy for scalar recursions and tests.
pub struct FnSystem<F, J> {
    dim: usize,
    steps: usize,
    f: F,
    jvp: J,
}

impl<F, J> FnSystem<F, J>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
    J: Fn(usize, &[f64], &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, steps: usize, f: F, jvp: J) -> Self {
        Self { dim, steps, f, jvp }
    }
}

impl<F, J> TransitionSystem for FnSystem<F, J>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
    J: Fn(usize, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn steps(&self) -> usize {
        self.steps
    }
    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        (self.f)(t, prev, next)
    }
    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        (self.jvp)(t, prev, tangent, out)
    }
}
