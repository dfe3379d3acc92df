use std::sync::Arc;

use super::{gate_logit, gate_slope, GatedKernel};
use crate::deer::{run_deer, DeerConfig};
use crate::error::{Error, Result};
use crate::noise::{Distribution, NoiseLayout, NoiseTable, ProbeStream, SlotId};
use crate::pscan::AffineElement;
use crate::sequence::InitialState;
use crate::system::{JacobianMode, TransitionSystem};
use crate::targets::TargetModel;

/// Hamiltonian Monte Carlo with a diagonal mass matrix over a fixed noise
/// table with slots `momentum` (D normals per step) and `u` (one uniform).
#[derive(Clone)]
pub struct HmcKernel {
    model: Arc<dyn TargetModel>,
    eps: f64,
    n_leapfrog: usize,
    mass: Vec<f64>,
    noise: NoiseTable,
    momentum: SlotId,
    u: SlotId,
}

/// How the `L` leapfrog steps inside one proposal are integrated.
#[derive(Debug, Clone, PartialEq)]
pub enum LeapfrogMode {
    Sequential,
    /// Solve the leapfrog recursion with the fixed-point driver.
    Parallel(DeerConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutcome {
    pub state: Vec<f64>,
    pub accepted: bool,
    /// `H₀ - H_L`.
    pub energy_change: f64,
    /// The parallel integrator did not converge and the proposal was redone sequentially.
    pub fallback: bool,
    /// Newton iterations spent on the parallel integrator (0 when sequential).
    pub leapfrog_iterations: usize,
}

/// `½ vᵀ M⁻¹ v - log p(x)`.
pub fn hamiltonian(model: &dyn TargetModel, x: &[f64], v: &[f64], mass: &[f64]) -> f64 {
    kinetic(v, mass) - model.logp(x)
}

fn kinetic(v: &[f64], mass: &[f64]) -> f64 {
    0.5 * v.iter().zip(mass).map(|(a, m)| a * a / m).sum::<f64>()
}

/// Positions visited by one proposal and the quantities the gate needs.
struct Trajectory {
    /// `x_1..x_L`, row-major.
    xs: Vec<f64>,
    g0: Vec<f64>,
    /// Momentum after the closing half step.
    v_end: Vec<f64>,
    g_end: Vec<f64>,
    delta: f64,
}

impl HmcKernel {
    pub fn layout(dim: usize) -> NoiseLayout {
        NoiseLayout::new()
            .with_slot("momentum", dim, Distribution::StandardNormal)
            .with_slot("u", 1, Distribution::Uniform)
    }

    pub fn new(
        model: Arc<dyn TargetModel>,
        eps: f64,
        n_leapfrog: usize,
        mass: Option<Vec<f64>>,
        seed: u64,
        steps: usize,
    ) -> Result<Self> {
        let noise = NoiseTable::new(seed, Self::layout(model.dim()), steps)?.materialize();
        Self::with_noise(model, eps, n_leapfrog, mass, noise)
    }

    pub fn with_noise(
        model: Arc<dyn TargetModel>,
        eps: f64,
        n_leapfrog: usize,
        mass: Option<Vec<f64>>,
        noise: NoiseTable,
    ) -> Result<Self> {
        let d = model.dim();
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("HMC step size must be positive, got {eps}")));
        }
        if n_leapfrog == 0 {
            return Err(Error::Config("HMC needs at least one leapfrog step".into()));
        }
        let mass = mass.unwrap_or_else(|| vec![1.0; d]);
        if mass.len() != d || mass.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config("mass must be a positive vector of the target dimension".into()));
        }
        let momentum = noise.slot("momentum")?;
        let u = noise.slot("u")?;
        if noise.slot_count(momentum) != d || noise.slot_count(u) != 1 {
            return Err(Error::Config("HMC noise layout does not match the target dimension".into()));
        }
        Ok(Self {
            model,
            eps,
            n_leapfrog,
            mass,
            noise,
            momentum,
            u,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn n_leapfrog(&self) -> usize {
        self.n_leapfrog
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn model(&self) -> &Arc<dyn TargetModel> {
        &self.model
    }

    pub fn noise(&self) -> &NoiseTable {
        &self.noise
    }

    /// The leapfrog recursion `[x, v] ↦ [x + ε v/m, v + ε ∇log p(x')]` over `L` steps.
    pub fn leapfrog_system(&self) -> LeapfrogSystem {
        LeapfrogSystem {
            model: self.model.clone(),
            eps: self.eps,
            mass: self.mass.clone(),
            steps: self.n_leapfrog,
        }
    }

    /// Initial momentum and the momentum after the opening half step.
    fn start(&self, t: usize, x: &[f64], g0: &mut [f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let mut xi = vec![0.0; x.len()];
        self.noise.fill(t, self.momentum, &mut xi);
        self.start_from(&xi, x, g0)
    }

    fn start_from(&self, xi: &[f64], x: &[f64], g0: &mut [f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let v0: Vec<f64> = xi.iter().zip(&self.mass).map(|(z, m)| m.sqrt() * z).collect();
        let lp0 = self.model.logp_grad(x, g0);
        let h0 = kinetic(&v0, &self.mass) - lp0;
        let v_half: Vec<f64> = v0.iter().zip(g0.iter()).map(|(v, g)| v + 0.5 * self.eps * g).collect();
        (v0, v_half, h0)
    }

    /// Sequential integration; returns `None` once anything turns non-finite.
    fn trajectory(&self, t: usize, x0: &[f64]) -> Option<Trajectory> {
        let mut xi = vec![0.0; x0.len()];
        self.noise.fill(t, self.momentum, &mut xi);
        self.trajectory_from(&xi, x0)
    }

    /// Integration from an explicit standard-normal momentum draw `xi`.
    fn trajectory_from(&self, xi: &[f64], x0: &[f64]) -> Option<Trajectory> {
        let d = x0.len();
        let eps = self.eps;
        let mut g0 = vec![0.0; d];
        let (_, mut v, h0) = self.start_from(xi, x0, &mut g0);
        let mut xs = vec![0.0; self.n_leapfrog * d];
        let mut x = x0.to_vec();
        let mut g = vec![0.0; d];
        let mut lp = 0.0;
        for l in 0..self.n_leapfrog {
            for i in 0..d {
                x[i] += eps * v[i] / self.mass[i];
            }
            lp = self.model.logp_grad(&x, &mut g);
            for i in 0..d {
                v[i] += eps * g[i];
            }
            xs[l * d..(l + 1) * d].copy_from_slice(&x);
        }
        for i in 0..d {
            v[i] -= 0.5 * eps * g[i];
        }
        let delta = h0 - (kinetic(&v, &self.mass) - lp);
        if !delta.is_finite() || xs.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Trajectory {
            xs,
            g0,
            v_end: v,
            g_end: g,
            delta,
        })
    }

    fn forward(&self, t: usize, x0: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) -> Option<bool> {
        let d = x0.len();
        let Some(tr) = self.trajectory(t, x0) else {
            next.fill(f64::NAN);
            out.fill(f64::NAN);
            return None;
        };
        let u = self.noise.scalar(t, self.u);
        let logit = gate_logit(tr.delta, u);
        let accepted = logit > 0.0;
        let l_count = self.n_leapfrog;
        let x_end = &tr.xs[(l_count - 1) * d..];
        next.copy_from_slice(if accepted { x_end } else { x0 });

        let slope = gate_slope(tr.delta, logit);
        let eps = self.eps;
        let mut hv = vec![0.0; d];
        for (v, o) in tangents.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            // Tangents of (x, v) along the trajectory; the momentum draw is fixed.
            let mut dx = v.to_vec();
            self.model.hvp(x0, &dx, &mut hv);
            let mut dv: Vec<f64> = hv.iter().map(|h| 0.5 * eps * h).collect();
            for l in 0..l_count {
                for i in 0..d {
                    dx[i] += eps * dv[i] / self.mass[i];
                }
                self.model.hvp(&tr.xs[l * d..(l + 1) * d], &dx, &mut hv);
                let w = if l + 1 == l_count { 0.5 * eps } else { eps };
                for i in 0..d {
                    dv[i] += w * hv[i];
                }
            }
            if accepted {
                o.copy_from_slice(&dx);
            } else {
                o.copy_from_slice(v);
            }
            if slope != 0.0 {
                // dΔ = dH₀ - dH_L
                let dh0: f64 = -tr.g0.iter().zip(v).map(|(g, a)| g * a).sum::<f64>();
                let mut dhl = 0.0;
                for i in 0..d {
                    dhl += tr.v_end[i] * dv[i] / self.mass[i] - tr.g_end[i] * dx[i];
                }
                let w = slope * (dh0 - dhl);
                for i in 0..d {
                    o[i] += (x_end[i] - x0[i]) * w;
                }
            }
        }
        Some(accepted)
    }
}

impl TransitionSystem for HmcKernel {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn steps(&self) -> usize {
        self.noise.steps()
    }

    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        self.forward(t, prev, &[], next, &mut []);
    }

    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        let mut next = vec![0.0; prev.len()];
        self.forward(t, prev, tangent, &mut next, out);
    }

    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        self.forward(t, prev, tangents, next, out);
    }

    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        let d = prev.len();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let mut cols = vec![0.0; d * d];
        let mut next = vec![0.0; d];
        self.forward(t, prev, &eye, &mut next, &mut cols);
        for j in 0..d {
            for i in 0..d {
                out[i * d + j] = cols[j * d + i];
            }
        }
    }
}

impl GatedKernel for HmcKernel {
    fn accepts(&self, t: usize, prev: &[f64]) -> bool {
        let mut next = vec![0.0; prev.len()];
        self.forward(t, prev, &[], &mut next, &mut []).unwrap_or(false)
    }
}

/// The kernel as a chain-level transition system (sequential leapfrog inside).
pub fn hmc_chain_system(kernel: &HmcKernel) -> &HmcKernel {
    kernel
}

/// Leapfrog integration written as a recursion over `s = [x, v]`.
#[derive(Clone)]
pub struct LeapfrogSystem {
    model: Arc<dyn TargetModel>,
    eps: f64,
    mass: Vec<f64>,
    steps: usize,
}

impl LeapfrogSystem {
    pub fn new(model: Arc<dyn TargetModel>, eps: f64, mass: Vec<f64>, steps: usize) -> Result<Self> {
        if mass.len() != model.dim() || mass.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("mass must be a positive vector of the target dimension".into()));
        }
        if !(eps > 0.0) || steps == 0 {
            return Err(Error::Config("leapfrog needs a positive step size and at least one step".into()));
        }
        Ok(Self {
            model,
            eps,
            mass,
            steps,
        })
    }

    fn half(&self) -> usize {
        self.mass.len()
    }

    fn advance_position(&self, s: &[f64]) -> Vec<f64> {
        let h = self.half();
        (0..h).map(|i| s[i] + self.eps * s[h + i] / self.mass[i]).collect()
    }
}

impl TransitionSystem for LeapfrogSystem {
    fn dim(&self) -> usize {
        2 * self.half()
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn step(&self, _t: usize, prev: &[f64], next: &mut [f64]) {
        let h = self.half();
        let xn = self.advance_position(prev);
        let mut g = vec![0.0; h];
        self.model.grad(&xn, &mut g);
        for i in 0..h {
            next[i] = xn[i];
            next[h + i] = prev[h + i] + self.eps * g[i];
        }
    }

    fn jvp(&self, _t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        let h = self.half();
        let xn = self.advance_position(prev);
        let dx: Vec<f64> = (0..h).map(|i| tangent[i] + self.eps * tangent[h + i] / self.mass[i]).collect();
        let mut hv = vec![0.0; h];
        self.model.hvp(&xn, &dx, &mut hv);
        for i in 0..h {
            out[i] = dx[i];
            out[h + i] = tangent[h + i] + self.eps * hv[i];
        }
    }

    fn block_jacobian(&self, _t: usize, prev: &[f64], probes: &[f64], blocks: &mut [f64]) -> Result<()> {
        let h = self.half();
        let xn = self.advance_position(prev);
        let n = probes.len() / h;
        let mut dhat = vec![0.0; h];
        let mut hz = vec![0.0; h];
        for z in probes.chunks_exact(h) {
            self.model.hvp(&xn, z, &mut hz);
            for i in 0..h {
                dhat[i] += z[i] * hz[i];
            }
        }
        let (a, rest) = blocks.split_at_mut(h);
        let (b, rest) = rest.split_at_mut(h);
        let (c, d) = rest.split_at_mut(h);
        for i in 0..h {
            let di = dhat[i] / n as f64;
            a[i] = 1.0;
            b[i] = self.eps / self.mass[i];
            c[i] = self.eps * di;
            d[i] = 1.0 + self.eps * self.eps * di / self.mass[i];
        }
        Ok(())
    }

    fn supports(&self, _mode: JacobianMode) -> bool {
        true
    }
}

/// One leapfrog step `x' = x + ε v/m`, `v' = v + ε ∇log p(x')` on `s = [x, v]`.
pub fn leapfrog_step(s: &[f64], kernel: &HmcKernel) -> Result<Vec<f64>> {
    let sys = kernel.leapfrog_system();
    if s.len() != sys.dim() {
        return Err(Error::Structure(format!("leapfrog state has length {}, expected {}", s.len(), sys.dim())));
    }
    let mut next = vec![0.0; s.len()];
    sys.step(0, s, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            t: 0,
            detail: "leapfrog step is not finite".into(),
        });
    }
    Ok(next)
}

/// Block-diagonal Jacobian estimate of one leapfrog step from `n_samples`
/// Hessian probes at the advanced position.
pub fn leapfrog_block_jacobian(
    s: &[f64],
    kernel: &HmcKernel,
    n_samples: usize,
    probes: &ProbeStream,
    iteration: usize,
    t: usize,
) -> Result<AffineElement> {
    let sys = kernel.leapfrog_system();
    let h = kernel.model.dim();
    if s.len() != 2 * h {
        return Err(Error::Structure(format!("leapfrog state has length {}, expected {}", s.len(), 2 * h)));
    }
    if n_samples == 0 {
        return Err(Error::Config("need at least one probe".into()));
    }
    let mut z = vec![0.0; n_samples * h];
    for k in 0..n_samples {
        probes.fill_rademacher(iteration, t, k, &mut z[k * h..(k + 1) * h]);
    }
    let mut blocks = vec![0.0; 4 * h];
    sys.block_jacobian(t, s, &z, &mut blocks)?;
    Ok(AffineElement::Block2x2 {
        a: blocks[..h].to_vec(),
        b: blocks[h..2 * h].to_vec(),
        c: blocks[2 * h..3 * h].to_vec(),
        d: blocks[3 * h..].to_vec(),
        u: vec![0.0; 2 * h],
    })
}

/// One HMC transition from `x` at chain step `t`.
pub fn hmc_step(x: &[f64], t: usize, kernel: &HmcKernel, mode: &LeapfrogMode) -> Result<HmcOutcome> {
    let d = kernel.dim();
    if x.len() != d {
        return Err(Error::Structure(format!("state has length {}, target {d}", x.len())));
    }
    if t >= kernel.steps() {
        return Err(Error::Index {
            what: "HMC step",
            index: t,
            len: kernel.steps(),
        });
    }
    let diverged = || Error::Diverged {
        t,
        detail: "HMC trajectory or energy is not finite".into(),
    };
    let mut g0 = vec![0.0; d];
    let (_, v_half, h0) = kernel.start(t, x, &mut g0);

    let mut fallback = false;
    let mut iterations = 0;
    let mut end: Option<Vec<f64>> = None;
    if let LeapfrogMode::Parallel(cfg) = mode {
        let sys = kernel.leapfrog_system();
        let mut cfg = cfg.clone();
        cfg.probe_seed = cfg.probe_seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let s0: Vec<f64> = x.iter().chain(&v_half).copied().collect();
        let s0 = InitialState::new(s0).map_err(|_| diverged())?;
        match run_deer(&sys, &s0, &cfg) {
            Ok(res) if res.converged => {
                iterations = res.iterations;
                end = Some(res.trace.step(res.trace.len() - 1).to_vec());
            }
            Ok(res) => {
                iterations = res.iterations;
                fallback = true;
            }
            Err(Error::SolverDiverged { .. }) => fallback = true,
            Err(e) => return Err(e),
        }
    }
    let (x_end, mut v_end) = match end {
        Some(s) => (s[..d].to_vec(), s[d..].to_vec()),
        None => {
            let sys = kernel.leapfrog_system();
            let mut s: Vec<f64> = x.iter().chain(&v_half).copied().collect();
            let mut next = vec![0.0; 2 * d];
            for l in 0..kernel.n_leapfrog {
                sys.step(l, &s, &mut next);
                std::mem::swap(&mut s, &mut next);
            }
            (s[..d].to_vec(), s[d..].to_vec())
        }
    };
    let mut g_end = vec![0.0; d];
    let lp_end = kernel.model.logp_grad(&x_end, &mut g_end);
    for i in 0..d {
        v_end[i] -= 0.5 * kernel.eps * g_end[i];
    }
    let delta = h0 - (kinetic(&v_end, &kernel.mass) - lp_end);
    if !delta.is_finite() || x_end.iter().any(|v| !v.is_finite()) {
        return Err(diverged());
    }
    let accepted = gate_logit(delta, kernel.noise.scalar(t, kernel.u)) > 0.0;
    Ok(HmcOutcome {
        state: if accepted { x_end } else { x.to_vec() },
        accepted,
        energy_change: delta,
        fallback,
        leapfrog_iterations: iterations,
    })
}
