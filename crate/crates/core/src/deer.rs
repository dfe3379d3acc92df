//! Newton and quasi-Newton fixed-point drivers for nonlinear recursions.
//!
//! Each iteration linearizes every transition around the current trajectory
//! guess, `s_t ≈ J_t s_{t-1} + (f_t(s^{(i)}_{t-1}) - J_t s^{(i)}_{t-1})`, and
//! solves the resulting linear recursion with the parallel scan. `J_t` is the
//! full Jacobian (DEER), a Hutchinson estimate of its diagonal (stochastic
//! quasi-DEER) or the diagonals of its four blocks (block quasi-DEER).
//!
//! Whatever the Jacobian approximation, step `t` of iterate `i` is exact once
//! `t <= i`, so the iteration terminates in at most `T` steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::ProbeStream;
use crate::pscan::{apply_into, parallel_affine_solve_into, AffineKind, AffineSeq};
use crate::sequence::{InitialState, StateSequence};
use crate::system::{JacobianMode, TransitionSystem};

/// `ceil(50 + 5 T 1e-4)`.
pub fn default_max_iters(len: usize) -> usize {
    (50.0 + 5.0 * len as f64 * 1e-4).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeerConfig {
    pub mode: JacobianMode,
    pub atol: f64,
    pub rtol: f64,
    pub max_iters: usize,
    pub hutchinson_samples: usize,
    /// Jacobian scale `λ ∈ (0, 1]`.
    pub damping: f64,
    /// Entrywise bound on Jacobian magnitudes; `f64::INFINITY` disables clipping.
    pub clip: f64,
    pub window_len: Option<usize>,
    pub full_trace: bool,
    /// Positive diagonal `P`. Dense and block Jacobians become `P⁻¹ J P`; the
    /// Hutchinson estimate probes with `P z`, estimating `diag(J)` with the
    /// off-diagonal noise measured in the scale of `P`.
    pub preconditioner: Option<Vec<f64>>,
    /// Seed of the Rademacher probe stream.
    pub probe_seed: u64,
    /// Scan chunk length; `None` picks the default for the current pool.
    pub chunk_len: Option<usize>,
    /// Abort when `Δ_max` exceeds this multiple of its first value.
    pub divergence_factor: f64,
}

impl DeerConfig {
    pub fn new(mode: JacobianMode, len: usize) -> Self {
        Self {
            mode,
            atol: 1e-4,
            rtol: 1e-3,
            max_iters: default_max_iters(len),
            hutchinson_samples: 1,
            damping: 1.0,
            clip: f64::INFINITY,
            window_len: None,
            full_trace: false,
            preconditioner: None,
            probe_seed: 0,
            chunk_len: None,
            divergence_factor: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0) {
            return Err(Error::Config(format!("atol must be positive, got {}", self.atol)));
        }
        if !(self.rtol >= 0.0) {
            return Err(Error::Config(format!("rtol must be non-negative, got {}", self.rtol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.hutchinson_samples == 0 {
            return Err(Error::Config("hutchinson_samples must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.window_len == Some(0) {
            return Err(Error::Config("window_len must be at least 1".into()));
        }
        if let Some(p) = &self.preconditioner {
            if p.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::Config("preconditioner entries must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeerResult {
    pub trace: StateSequence,
    pub iterations: usize,
    pub delta_history: Vec<f64>,
    pub converged: bool,
    /// Iteration (1-based) from which each step stayed within tolerance; 0 if never.
    pub per_step_converged_at: Vec<usize>,
    pub full_trace: Option<Vec<StateSequence>>,
}

/// Elementwise `|next - prev| <= atol + rtol |next|`; also returns `max |next - prev|`.
pub fn converged(prev: &StateSequence, next: &StateSequence, atol: f64, rtol: f64) -> Result<(bool, f64)> {
    prev.same_shape(next)?;
    Ok(slices_converged(prev.as_slice(), next.as_slice(), atol, rtol))
}

fn slices_converged(prev: &[f64], next: &[f64], atol: f64, rtol: f64) -> (bool, f64) {
    let mut ok = true;
    let mut dmax = 0.0_f64;
    for (p, n) in prev.iter().zip(next) {
        let d = (n - p).abs();
        // NaN compares false and fails the test.
        if !(d <= atol + rtol * n.abs()) {
            ok = false;
        }
        dmax = dmax.max(d);
        if d.is_nan() {
            dmax = f64::NAN;
        }
    }
    (ok, dmax)
}

fn step_within(prev: &[f64], next: &[f64], atol: f64, rtol: f64) -> bool {
    prev.iter()
        .zip(next)
        .all(|(p, n)| (n - p).abs() <= atol + rtol * n.abs())
}

/// Mean over `n_samples` Rademacher probes of `z ⊙ (J_t z)`, one JVP per probe.
pub fn hutchinson_diag<S: TransitionSystem + ?Sized>(
    system: &S,
    t: usize,
    prev: &[f64],
    n_samples: usize,
    probes: &ProbeStream,
    iteration: usize,
) -> Vec<f64> {
    let d = system.dim();
    let mut z = vec![0.0; d];
    let mut jz = vec![0.0; d];
    let mut acc = vec![0.0; d];
    for k in 0..n_samples {
        probes.fill_rademacher(iteration, t, k, &mut z);
        system.jvp(t, prev, &z, &mut jz);
        for i in 0..d {
            acc[i] += z[i] * jz[i];
        }
    }
    let scale = 1.0 / n_samples as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

fn affine_kind(mode: JacobianMode) -> AffineKind {
    match mode {
        JacobianMode::Dense => AffineKind::Dense,
        JacobianMode::DiagStochastic => AffineKind::Diag,
        JacobianMode::Block2x2Stochastic => AffineKind::Block2x2,
    }
}

fn check_inputs<S: TransitionSystem + ?Sized>(system: &S, s0: &[f64], cfg: &DeerConfig) -> Result<()> {
    cfg.validate()?;
    let d = system.dim();
    if s0.len() != d {
        return Err(Error::Structure(format!("initial state has dimension {}, system has {d}", s0.len())));
    }
    if !system.supports(cfg.mode) {
        return Err(Error::Config(format!("system does not support {} linearization", cfg.mode)));
    }
    if cfg.mode == JacobianMode::Block2x2Stochastic && d % 2 != 0 {
        return Err(Error::Structure(format!("block mode needs an even state dimension, got {d}")));
    }
    if let Some(p) = &cfg.preconditioner {
        if p.len() != d {
            return Err(Error::Config(format!("preconditioner has length {}, state has {d}", p.len())));
        }
    }
    Ok(())
}

struct Scratch {
    fx: Vec<f64>,
    probes: Vec<f64>,
    jz: Vec<f64>,
    jac: Vec<f64>,
    zeros: Vec<f64>,
    jp: Vec<f64>,
}

/// Fill `elems` with the linearization of steps `start..start + elems.len()`
/// around `guess` (a full-length trajectory), with `s_prev0` standing in for
/// the state before `start`.
fn linearize_range<S: TransitionSystem + ?Sized>(
    system: &S,
    guess: &[f64],
    s_prev0: &[f64],
    start: usize,
    cfg: &DeerConfig,
    iteration: usize,
    elems: &mut AffineSeq,
) -> Result<()> {
    let d = system.dim();
    let kind = elems.kind();
    let jl = kind.jac_len(d);
    let n_samples = cfg.hutchinson_samples;
    let probes = ProbeStream::new(cfg.probe_seed);
    let probe_len = match cfg.mode {
        JacobianMode::Block2x2Stochastic => d / 2,
        _ => d,
    };
    let (jac, bias) = elems.parts_mut();

    jac.par_chunks_mut(jl)
        .zip(bias.par_chunks_mut(d))
        .enumerate()
        .with_min_len(16)
        .try_for_each_init(
            || Scratch {
                fx: vec![0.0; d],
                probes: vec![0.0; n_samples * probe_len],
                jz: vec![0.0; n_samples * d],
                jac: vec![0.0; jl],
                zeros: vec![0.0; d],
                jp: vec![0.0; d],
            },
            |sc, (k, (jt, ut))| -> Result<()> {
                let t = start + k;
                let prev = if t == start { s_prev0 } else { &guess[(t - 1) * d..t * d] };
                match cfg.mode {
                    JacobianMode::Dense => {
                        system.step(t, prev, &mut sc.fx);
                        system.dense_jacobian(t, prev, jt);
                        if let Some(p) = &cfg.preconditioner {
                            for i in 0..d {
                                for j in 0..d {
                                    jt[i * d + j] *= p[j] / p[i];
                                }
                            }
                        }
                    }
                    JacobianMode::DiagStochastic => {
                        for s in 0..n_samples {
                            let z = &mut sc.probes[s * d..(s + 1) * d];
                            probes.fill_rademacher(iteration, t, s, z);
                            // Probe P z so the estimate targets diag(P⁻¹ J P).
                            if let Some(p) = &cfg.preconditioner {
                                z.iter_mut().zip(p).for_each(|(zi, pi)| *zi *= pi);
                            }
                        }
                        system.step_jvps(t, prev, &sc.probes, &mut sc.fx, &mut sc.jz);
                        jt.fill(0.0);
                        for (z, jz) in sc.probes.chunks_exact(d).zip(sc.jz.chunks_exact(d)) {
                            for i in 0..d {
                                jt[i] += z[i] * jz[i];
                            }
                        }
                        let scale = 1.0 / n_samples as f64;
                        for (i, v) in jt.iter_mut().enumerate() {
                            *v *= scale;
                            if let Some(p) = &cfg.preconditioner {
                                *v /= p[i] * p[i];
                            }
                        }
                    }
                    JacobianMode::Block2x2Stochastic => {
                        let h = d / 2;
                        for s in 0..n_samples {
                            probes.fill_rademacher(iteration, t, s, &mut sc.probes[s * h..(s + 1) * h]);
                        }
                        system.step(t, prev, &mut sc.fx);
                        system.block_jacobian(t, prev, &sc.probes, &mut sc.jac)?;
                        jt.copy_from_slice(&sc.jac);
                        if let Some(p) = &cfg.preconditioner {
                            for i in 0..h {
                                jt[h + i] *= p[h + i] / p[i];
                                jt[2 * h + i] *= p[i] / p[h + i];
                            }
                        }
                    }
                }
                for v in jt.iter_mut() {
                    *v = (*v * cfg.damping).clamp(-cfg.clip, cfg.clip);
                }
                if let Some(i) = jt.iter().position(|v| !v.is_finite()) {
                    return Err(Error::SolverDiverged {
                        iteration,
                        detail: format!("non-finite Jacobian entry {i} at step {t}"),
                    });
                }
                if let Some(i) = sc.fx.iter().chain(prev).position(|v| !v.is_finite()) {
                    return Err(Error::SolverDiverged {
                        iteration,
                        detail: format!("non-finite transition input/output (entry {i}) at step {t}"),
                    });
                }
                // u_t = f_t(prev) - J prev
                apply_into(kind, d, jt, &sc.zeros, prev, &mut sc.jp);
                for i in 0..d {
                    ut[i] = sc.fx[i] - sc.jp[i];
                }
                Ok(())
            },
        )
}

/// Linearize every step around `guess` (the affine elements of one Newton step).
pub fn linearize<S: TransitionSystem + ?Sized>(
    system: &S,
    guess: &StateSequence,
    s0: &InitialState,
    cfg: &DeerConfig,
    iteration: usize,
) -> Result<AffineSeq> {
    check_inputs(system, s0.as_slice(), cfg)?;
    check_guess(system, guess)?;
    let mut elems = AffineSeq::identity(affine_kind(cfg.mode), system.dim(), system.steps())?;
    linearize_range(system, guess.as_slice(), s0.as_slice(), 0, cfg, iteration, &mut elems)?;
    Ok(elems)
}

fn check_guess<S: TransitionSystem + ?Sized>(system: &S, guess: &StateSequence) -> Result<()> {
    if guess.len() != system.steps() || guess.dim() != system.dim() {
        return Err(Error::Structure(format!(
            "guess is {}x{}, system is {}x{}",
            guess.len(),
            guess.dim(),
            system.steps(),
            system.dim()
        )));
    }
    Ok(())
}

/// One (quasi-)Newton update of the whole trajectory.
pub fn deer_iterate<S: TransitionSystem + ?Sized>(
    system: &S,
    guess: &StateSequence,
    s0: &InitialState,
    cfg: &DeerConfig,
    iteration: usize,
) -> Result<StateSequence> {
    let elems = linearize(system, guess, s0, cfg, iteration)?;
    let mut out = vec![0.0; guess.len() * guess.dim()];
    parallel_affine_solve_into(&elems, s0.as_slice(), cfg.chunk_len, &mut out)?;
    let next = StateSequence::from_vec(out, guess.len(), guess.dim())?;
    if let Some(t) = next.first_non_finite() {
        return Err(Error::SolverDiverged {
            iteration,
            detail: format!("non-finite state at step {t} after the scan"),
        });
    }
    Ok(next)
}

/// Iterate from `s^{(0)}_t = s_0` until two consecutive iterates agree within
/// tolerance or `max_iters` is reached. Hitting the cap is not an error; the
/// last iterate is returned with `converged = false`.
pub fn run_deer<S: TransitionSystem + ?Sized>(system: &S, s0: &InitialState, cfg: &DeerConfig) -> Result<DeerResult> {
    check_inputs(system, s0.as_slice(), cfg)?;
    let len = system.steps();
    let d = system.dim();
    if len == 0 {
        return Err(Error::Structure("system has no steps".into()));
    }
    match cfg.window_len {
        Some(w) if w < len => run_windowed(system, s0, cfg, w),
        _ => run_full(system, s0, cfg, len, d),
    }
}

fn guard(history: &[f64], factor: f64, iteration: usize) -> Result<()> {
    let first = history[0];
    let last = *history.last().unwrap();
    if last.is_nan() || (first > 0.0 && last > factor * first) {
        return Err(Error::SolverDiverged {
            iteration,
            detail: format!("Δ_max grew from {first:.3e} to {last:.3e}"),
        });
    }
    Ok(())
}

fn run_full<S: TransitionSystem + ?Sized>(
    system: &S,
    s0: &InitialState,
    cfg: &DeerConfig,
    len: usize,
    d: usize,
) -> Result<DeerResult> {
    let mut guess = StateSequence::repeat(s0.as_slice(), len)?;
    let mut next = guess.clone();
    let mut elems = AffineSeq::identity(affine_kind(cfg.mode), d, len)?;
    let mut history = Vec::new();
    let mut per_step = vec![0usize; len];
    let mut full = cfg.full_trace.then(Vec::new);
    let mut done = false;
    let mut iterations = 0;

    for i in 1..=cfg.max_iters {
        iterations = i;
        linearize_range(system, guess.as_slice(), s0.as_slice(), 0, cfg, i, &mut elems)?;
        parallel_affine_solve_into(&elems, s0.as_slice(), cfg.chunk_len, next.as_mut_slice())?;
        if let Some(t) = next.first_non_finite() {
            return Err(Error::SolverDiverged {
                iteration: i,
                detail: format!("non-finite state at step {t} after the scan"),
            });
        }
        let (ok, dmax) = slices_converged(guess.as_slice(), next.as_slice(), cfg.atol, cfg.rtol);
        history.push(dmax);
        guard(&history, cfg.divergence_factor, i)?;
        per_step
            .par_iter_mut()
            .zip(guess.as_slice().par_chunks(d).zip(next.as_slice().par_chunks(d)))
            .for_each(|(c, (p, n))| {
                if step_within(p, n, cfg.atol, cfg.rtol) {
                    if *c == 0 {
                        *c = i;
                    }
                } else {
                    *c = 0;
                }
            });
        std::mem::swap(&mut guess, &mut next);
        if let Some(f) = full.as_mut() {
            f.push(guess.clone());
        }
        if ok {
            done = true;
            break;
        }
    }
    Ok(DeerResult {
        trace: guess,
        iterations,
        delta_history: history,
        converged: done,
        per_step_converged_at: per_step,
        full_trace: full,
    })
}

/// Sliding-window iteration: each update touches only `[w, w + window)`,
/// seeded from the frozen state `s_{w-1}`, and `w` then advances to the first
/// step that has not converged. States past the window keep their previous
/// iterate; states before `w` are frozen.
fn run_windowed<S: TransitionSystem + ?Sized>(
    system: &S,
    s0: &InitialState,
    cfg: &DeerConfig,
    window: usize,
) -> Result<DeerResult> {
    let len = system.steps();
    let d = system.dim();
    let mut trace = StateSequence::repeat(s0.as_slice(), len)?;
    let mut elems = AffineSeq::identity(affine_kind(cfg.mode), d, window)?;
    let mut buf = vec![0.0; window * d];
    let mut history = Vec::new();
    let mut per_step = vec![0usize; len];
    let mut full = cfg.full_trace.then(Vec::new);
    let mut start = 0usize;
    let mut iterations = 0;

    for i in 1..=cfg.max_iters {
        iterations = i;
        let end = (start + window).min(len);
        let w = end - start;
        elems.resize(w);
        let seed_state = if start == 0 {
            s0.as_slice().to_vec()
        } else {
            trace.step(start - 1).to_vec()
        };
        linearize_range(system, trace.as_slice(), &seed_state, start, cfg, i, &mut elems)?;
        let out = &mut buf[..w * d];
        parallel_affine_solve_into(&elems, &seed_state, cfg.chunk_len, out)?;
        if let Some(k) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::SolverDiverged {
                iteration: i,
                detail: format!("non-finite state at step {} after the scan", start + k / d),
            });
        }
        let old = &trace.as_slice()[start * d..end * d];
        let (_, dmax) = slices_converged(old, out, cfg.atol, cfg.rtol);
        history.push(dmax);
        guard(&history, cfg.divergence_factor, i)?;

        // The first window step is exact: its predecessor is frozen.
        let mut first_bad = w;
        for k in 1..w {
            if !step_within(&old[k * d..(k + 1) * d], &out[k * d..(k + 1) * d], cfg.atol, cfg.rtol) {
                first_bad = k;
                break;
            }
        }
        trace.as_mut_slice()[start * d..end * d].copy_from_slice(out);
        for c in &mut per_step[start..start + first_bad] {
            *c = i;
        }
        start += first_bad;
        if let Some(f) = full.as_mut() {
            f.push(trace.clone());
        }
        if start >= len {
            break;
        }
    }
    Ok(DeerResult {
        trace,
        iterations,
        delta_history: history,
        converged: start >= len,
        per_step_converged_at: per_step,
        full_trace: full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::InitialState;
    use crate::system::{sequential_evaluate, FnSystem};

    fn tanh_system(u: Vec<f64>) -> impl TransitionSystem {
        FnSystem::new(
            1,
            u.len(),
            move |t, p: &[f64], n: &mut [f64]| n[0] = (0.9 * p[0]).tanh() + u[t],
            move |_, p: &[f64], v: &[f64], o: &mut [f64]| {
                let th = (0.9 * p[0]).tanh();
                o[0] = 0.9 * (1.0 - th * th) * v[0];
            },
        )
    }

    fn random_u(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|t| crate::noise::noise_value(seed, t, "u", 0, crate::noise::Distribution::StandardNormal) * 0.5)
            .collect()
    }

    #[test]
    fn converged_contract() {
        let a = StateSequence::zeros(3, 2).unwrap();
        assert_eq!(converged(&a, &a, 1e-4, 1e-3).unwrap(), (true, 0.0));
        let b = StateSequence::repeat(&[2e-4, 2e-4], 3).unwrap();
        let (ok, dmax) = converged(&a, &b, 1e-4, 1e-3).unwrap();
        assert!(!ok);
        assert_eq!(dmax, 2e-4);
        let p = StateSequence::repeat(&[10.0, -10.0], 3).unwrap();
        let q = StateSequence::repeat(&[10.0 * (1.0 + 5e-4), -10.0 * (1.0 + 5e-4)], 3).unwrap();
        assert!(converged(&p, &q, 1e-4, 1e-3).unwrap().0);
        let r = StateSequence::zeros(2, 2).unwrap();
        assert!(converged(&a, &r, 1e-4, 1e-3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DeerConfig::new(JacobianMode::Dense, 10);
        assert!(c.validate().is_ok());
        c.damping = 0.0;
        assert!(c.validate().is_err());
        c.damping = 1.0;
        c.atol = 0.0;
        assert!(c.validate().is_err());
        c.atol = 1e-4;
        c.max_iters = 0;
        assert!(c.validate().is_err());
        assert_eq!(default_max_iters(100_000), 100);
        assert_eq!(default_max_iters(1000), 51);
    }

    #[test]
    fn affine_system_one_iteration() {
        let sys = FnSystem::new(
            2,
            50,
            |t, p: &[f64], n: &mut [f64]| {
                n[0] = 0.9 * p[0] - 0.2 * p[1] + t as f64 * 0.01;
                n[1] = 0.3 * p[0] + 0.5 * p[1] - 1.0;
            },
            |_, _: &[f64], v: &[f64], o: &mut [f64]| {
                o[0] = 0.9 * v[0] - 0.2 * v[1];
                o[1] = 0.3 * v[0] + 0.5 * v[1];
            },
        );
        let s0 = InitialState::new(vec![1.0, -1.0]).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        let guess = StateSequence::repeat(&[3.0, 3.0], 50).unwrap();
        let cfg = DeerConfig::new(JacobianMode::Dense, 50);
        let one = deer_iterate(&sys, &guess, &s0, &cfg, 1).unwrap();
        let (ok, _) = converged(&truth, &one, 1e-12, 0.0).unwrap();
        assert!(ok);
        // run_deer needs one more sweep to observe that nothing moved.
        let res = run_deer(&sys, &s0, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 2);
        assert!(res.delta_history[1] < 1e-12);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let sys = tanh_system(random_u(200, 1));
        let s0 = InitialState::new(vec![0.1]).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        for mode in [JacobianMode::Dense, JacobianMode::DiagStochastic] {
            let cfg = DeerConfig::new(mode, 200);
            let out = deer_iterate(&sys, &truth, &s0, &cfg, 1).unwrap();
            let (_, dmax) = converged(&truth, &out, 1.0, 0.0).unwrap();
            assert!(dmax < 1e-10, "{mode}: {dmax}");
        }
    }

    #[test]
    fn tanh_recursion_converges_to_oracle() {
        let sys = tanh_system(random_u(256, 2));
        let s0 = InitialState::new(vec![0.0]).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::Dense, 256);
        cfg.full_trace = true;
        cfg.max_iters = 256;
        let res = run_deer(&sys, &s0, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.iterations < 256);
        let (ok, _) = converged(&truth, &res.trace, cfg.atol, cfg.rtol).unwrap();
        assert!(ok);
        assert_eq!(res.full_trace.as_ref().unwrap().len(), res.iterations);
        // Error against the oracle never grows once the front has passed.
        let errs: Vec<f64> = res
            .full_trace
            .unwrap()
            .iter()
            .map(|s| converged(&truth, s, 1.0, 0.0).unwrap().1)
            .collect();
        let tail = &errs[errs.len() / 2..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{errs:?}");
    }

    #[test]
    fn expansive_tanh_recursion_still_converges() {
        // Jacobians up to 2: the first iterates blow up, Newton recovers.
        let u = random_u(256, 7);
        let sys = FnSystem::new(
            1,
            256,
            move |t, p: &[f64], n: &mut [f64]| n[0] = (2.0 * p[0]).tanh() + u[t],
            |_, p: &[f64], v: &[f64], o: &mut [f64]| {
                let th = (2.0 * p[0]).tanh();
                o[0] = 2.0 * (1.0 - th * th) * v[0];
            },
        );
        let s0 = InitialState::new(vec![0.0]).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::Dense, 256);
        cfg.max_iters = 256;
        cfg.divergence_factor = f64::INFINITY;
        let res = run_deer(&sys, &s0, &cfg).unwrap();
        assert!(res.converged);
        assert!(converged(&truth, &res.trace, cfg.atol, cfg.rtol).unwrap().0);
        let h = &res.delta_history;
        let tail = &h[h.len() - 4..];
        assert!(tail.windows(2).all(|w| w[1] < w[0]), "{h:?}");
    }

    #[test]
    fn early_stopping_returns_last_iterate() {
        let sys = tanh_system(random_u(2000, 3));
        let s0 = InitialState::new(vec![0.0]).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::DiagStochastic, 2000);
        cfg.max_iters = 3;
        cfg.full_trace = true;
        let res = run_deer(&sys, &s0, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 3);
        assert_eq!(&res.full_trace.as_ref().unwrap()[2], &res.trace);
    }

    #[test]
    fn hutchinson_on_diagonal_jacobian_is_exact() {
        let sys = FnSystem::new(
            2,
            1,
            |_, p: &[f64], n: &mut [f64]| {
                n[0] = 3.0 * p[0];
                n[1] = -2.0 * p[1];
            },
            |_, _: &[f64], v: &[f64], o: &mut [f64]| {
                o[0] = 3.0 * v[0];
                o[1] = -2.0 * v[1];
            },
        );
        let probes = ProbeStream::new(9);
        for it in 0..10 {
            assert_eq!(hutchinson_diag(&sys, 0, &[1.0, 1.0], 1, &probes, it), vec![3.0, -2.0]);
        }
    }

    #[test]
    fn hutchinson_enumeration_on_upper_triangular() {
        // J = [[1,1],[0,1]]; z ⊙ Jz = (1 + z0 z1, 1). Averaging the four sign
        // patterns gives (1, 1).
        let jz = |z: [f64; 2]| [z[0] * (z[0] + z[1]), z[1] * z[1]];
        let mut acc = [0.0; 2];
        for z in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
            let v = jz(z);
            acc[0] += v[0] / 4.0;
            acc[1] += v[1] / 4.0;
        }
        assert_eq!(acc, [1.0, 1.0]);
        let sys = FnSystem::new(
            2,
            1,
            |_, p: &[f64], n: &mut [f64]| {
                n[0] = p[0] + p[1];
                n[1] = p[1];
            },
            |_, _: &[f64], v: &[f64], o: &mut [f64]| {
                o[0] = v[0] + v[1];
                o[1] = v[1];
            },
        );
        let probes = ProbeStream::new(1);
        let singles: Vec<f64> = (0..40).map(|it| hutchinson_diag(&sys, 0, &[0.0, 0.0], 1, &probes, it)[0]).collect();
        assert!(singles.iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(singles.contains(&0.0) && singles.contains(&2.0));
    }

    #[test]
    fn clipping_and_damping_bound_entries() {
        let sys = FnSystem::new(
            1,
            20,
            |_, p: &[f64], n: &mut [f64]| n[0] = 5.0 * p[0].sin(),
            |_, p: &[f64], v: &[f64], o: &mut [f64]| o[0] = 5.0 * p[0].cos() * v[0],
        );
        let s0 = InitialState::new(vec![0.3]).unwrap();
        let guess = StateSequence::repeat(&[0.3], 20).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::Dense, 20);
        cfg.clip = 1.0;
        cfg.damping = 0.5;
        let el = linearize(&sys, &guess, &s0, &cfg, 1).unwrap();
        assert!(el.jacobians().iter().all(|j| j.abs() <= 1.0));
        cfg.clip = f64::INFINITY;
        let el = linearize(&sys, &guess, &s0, &cfg, 1).unwrap();
        assert!((el.jacobians()[0] - 2.5 * 0.3f64.cos()).abs() < 1e-14);
    }

    #[test]
    fn window_of_one_is_sequential() {
        let sys = tanh_system(random_u(64, 4));
        let s0 = InitialState::new(vec![0.2]).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::DiagStochastic, 64);
        cfg.window_len = Some(1);
        cfg.max_iters = 1000;
        let res = run_deer(&sys, &s0, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 64);
        assert!(converged(&truth, &res.trace, 1e-13, 0.0).unwrap().0);
    }

    #[test]
    fn full_window_matches_plain_run() {
        let sys = tanh_system(random_u(300, 5));
        let s0 = InitialState::new(vec![0.2]).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::Dense, 300);
        cfg.max_iters = 300;
        let plain = run_deer(&sys, &s0, &cfg).unwrap();
        cfg.window_len = Some(300);
        let win = run_deer(&sys, &s0, &cfg).unwrap();
        assert_eq!(plain, win);
        cfg.window_len = Some(40);
        let small = run_deer(&sys, &s0, &cfg).unwrap();
        let truth = sequential_evaluate(&sys, &s0).unwrap();
        assert!(small.converged);
        assert!(converged(&truth, &small.trace, cfg.atol, cfg.rtol).unwrap().0);
    }

    #[test]
    fn unsupported_mode_rejected() {
        let sys = tanh_system(random_u(4, 6));
        let s0 = InitialState::new(vec![0.0]).unwrap();
        let cfg = DeerConfig::new(JacobianMode::Block2x2Stochastic, 4);
        assert!(matches!(run_deer(&sys, &s0, &cfg), Err(Error::Config(_))));
    }
}
