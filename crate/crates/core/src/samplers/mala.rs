use std::sync::Arc;

use super::{gate_logit, gate_slope, GatedKernel};
use crate::error::{Error, Result};
use crate::noise::{Distribution, NoiseLayout, NoiseTable, SlotId};
use crate::system::TransitionSystem;
use crate::targets::TargetModel;

/// Metropolis-adjusted Langevin kernel over a fixed noise table with slots
/// `xi` (D normals per step) and `u` (one uniform per step).
#[derive(Clone)]
pub struct MalaKernel {
    model: Arc<dyn TargetModel>,
    eps: f64,
    noise: NoiseTable,
    xi: SlotId,
    u: SlotId,
}

/// Everything the forward step computes before gating.
#[derive(Debug, Clone, PartialEq)]
pub struct MalaProposal {
    pub proposal: Vec<f64>,
    /// `log p(x̃) - log p(x) + log q(x|x̃) - log q(x̃|x)`.
    pub delta: f64,
    /// `min(0, Δ) - log u`.
    pub gate_logit: f64,
    pub accepted: bool,
}

impl MalaKernel {
    pub fn layout(dim: usize) -> NoiseLayout {
        NoiseLayout::new()
            .with_slot("xi", dim, Distribution::StandardNormal)
            .with_slot("u", 1, Distribution::Uniform)
    }

    /// Kernel over a freshly materialized table for `steps` transitions.
    pub fn new(model: Arc<dyn TargetModel>, eps: f64, seed: u64, steps: usize) -> Result<Self> {
        let noise = NoiseTable::new(seed, Self::layout(model.dim()), steps)?.materialize();
        Self::with_noise(model, eps, noise)
    }

    pub fn with_noise(model: Arc<dyn TargetModel>, eps: f64, noise: NoiseTable) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("MALA step size must be positive, got {eps}")));
        }
        let xi = noise.slot("xi")?;
        let u = noise.slot("u")?;
        if noise.slot_count(xi) != model.dim() || noise.slot_count(u) != 1 {
            return Err(Error::Config("MALA noise layout does not match the target dimension".into()));
        }
        Ok(Self {
            model,
            eps,
            noise,
            xi,
            u,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn model(&self) -> &Arc<dyn TargetModel> {
        &self.model
    }

    pub fn noise(&self) -> &NoiseTable {
        &self.noise
    }

    pub fn propose(&self, t: usize, x: &[f64]) -> MalaProposal {
        let d = x.len();
        let mut next = vec![0.0; d];
        let mut info = Forward::default();
        self.forward(t, x, &[], &mut next, &mut [], &mut info);
        MalaProposal {
            proposal: info.proposal,
            delta: info.delta,
            gate_logit: info.logit,
            accepted: info.accepted,
        }
    }

    /// Forward step plus JVPs for every tangent in `tangents`.
    fn forward(&self, t: usize, x: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64], info: &mut Forward) {
        let d = x.len();
        let eps = self.eps;
        let n = tangents.len() / d;
        let m = self.model.as_ref();

        let mut gx = vec![0.0; d];
        let mut hx = vec![0.0; n * d];
        let lp_x = if n > 0 {
            let lp = m.logp_grad_hvp(x, &tangents[..d], &mut gx, &mut hx[..d]);
            for k in 1..n {
                m.hvp(x, &tangents[k * d..(k + 1) * d], &mut hx[k * d..(k + 1) * d]);
            }
            lp
        } else {
            m.logp_grad(x, &mut gx)
        };

        let mut xi = vec![0.0; d];
        self.noise.fill(t, self.xi, &mut xi);
        let u = self.noise.scalar(t, self.u);
        let scale = (2.0 * eps).sqrt();
        let xt: Vec<f64> = (0..d).map(|i| x[i] + eps * gx[i] + scale * xi[i]).collect();

        // dx̃ = v + ε H(x) v
        let mut dxt = vec![0.0; n * d];
        for k in 0..n {
            for i in 0..d {
                dxt[k * d + i] = tangents[k * d + i] + eps * hx[k * d + i];
            }
        }
        let mut gp = vec![0.0; d];
        let mut hp = vec![0.0; n * d];
        let lp_p = if xt.iter().all(|v| v.is_finite()) {
            if n > 0 {
                let lp = m.logp_grad_hvp(&xt, &dxt[..d], &mut gp, &mut hp[..d]);
                for k in 1..n {
                    m.hvp(&xt, &dxt[k * d..(k + 1) * d], &mut hp[k * d..(k + 1) * d]);
                }
                lp
            } else {
                m.logp_grad(&xt, &mut gp)
            }
        } else {
            f64::NAN
        };

        // r = x - x̃ - ε ∇log p(x̃); the forward residual is √(2ε) ξ.
        let r: Vec<f64> = (0..d).map(|i| x[i] - xt[i] - eps * gp[i]).collect();
        let logq_rev = -r.iter().map(|v| v * v).sum::<f64>() / (4.0 * eps);
        let logq_fwd = -0.5 * xi.iter().map(|v| v * v).sum::<f64>();
        let delta = lp_p - lp_x + logq_rev - logq_fwd;
        let logit = gate_logit(delta, u);
        let accepted = logit > 0.0;

        if !delta.is_finite() {
            next.fill(f64::NAN);
            out.fill(f64::NAN);
        } else {
            next.copy_from_slice(if accepted { &xt } else { x });
            let slope = gate_slope(delta, logit);
            for k in 0..n {
                let v = &tangents[k * d..(k + 1) * d];
                let dx = &dxt[k * d..(k + 1) * d];
                let o = &mut out[k * d..(k + 1) * d];
                if accepted {
                    o.copy_from_slice(dx);
                } else {
                    o.copy_from_slice(v);
                }
                if slope != 0.0 {
                    // dΔ = ∇log p(x̃)·dx̃ - ∇log p(x)·v - r·dr/(2ε), dr = v - dx̃ - ε H(x̃) dx̃
                    let mut dd = 0.0;
                    let mut rdr = 0.0;
                    for i in 0..d {
                        dd += gp[i] * dx[i] - gx[i] * v[i];
                        rdr += r[i] * (v[i] - dx[i] - eps * hp[k * d + i]);
                    }
                    dd -= rdr / (2.0 * eps);
                    let w = slope * dd;
                    for i in 0..d {
                        o[i] += (xt[i] - x[i]) * w;
                    }
                }
            }
        }
        info.proposal = xt;
        info.delta = delta;
        info.logit = logit;
        info.accepted = accepted;
    }
}

#[derive(Default)]
struct Forward {
    proposal: Vec<f64>,
    delta: f64,
    logit: f64,
    accepted: bool,
}

impl TransitionSystem for MalaKernel {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn steps(&self) -> usize {
        self.noise.steps()
    }

    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        self.forward(t, prev, &[], next, &mut [], &mut Forward::default());
    }

    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        let mut next = vec![0.0; prev.len()];
        self.forward(t, prev, tangent, &mut next, out, &mut Forward::default());
    }

    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        self.forward(t, prev, tangents, next, out, &mut Forward::default());
    }

    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        let d = prev.len();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let mut cols = vec![0.0; d * d];
        let mut next = vec![0.0; d];
        self.forward(t, prev, &eye, &mut next, &mut cols, &mut Forward::default());
        for j in 0..d {
            for i in 0..d {
                out[i * d + j] = cols[j * d + i];
            }
        }
    }
}

impl GatedKernel for MalaKernel {
    fn accepts(&self, t: usize, prev: &[f64]) -> bool {
        self.propose(t, prev).accepted
    }
}

/// One exact MALA transition.
pub fn mala_step(x: &[f64], t: usize, kernel: &MalaKernel) -> Result<Vec<f64>> {
    check_state(x, t, kernel)?;
    let mut next = vec![0.0; x.len()];
    kernel.step(t, x, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            t,
            detail: "MALA proposal or its density is not finite".into(),
        });
    }
    Ok(next)
}

/// Directional derivative of the gate-relaxed MALA map at `x` along `v`.
pub fn mala_jvp(x: &[f64], v: &[f64], t: usize, kernel: &MalaKernel) -> Result<Vec<f64>> {
    check_state(x, t, kernel)?;
    if v.len() != x.len() {
        return Err(Error::Structure(format!("tangent has length {}, state {}", v.len(), x.len())));
    }
    let mut out = vec![0.0; x.len()];
    kernel.jvp(t, x, v, &mut out);
    Ok(out)
}

fn check_state(x: &[f64], t: usize, kernel: &MalaKernel) -> Result<()> {
    if x.len() != kernel.dim() {
        return Err(Error::Structure(format!("state has length {}, target {}", x.len(), kernel.dim())));
    }
    if t >= kernel.steps() {
        return Err(Error::Index {
            what: "MALA step",
            index: t,
            len: kernel.steps(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("MALA state must be finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{synthetic_credit, BayesLogReg, Gaussian, ModelSpec, StdNormal};

    fn std_normal(d: usize) -> Arc<dyn TargetModel> {
        Arc::new(StdNormal::new(d).unwrap())
    }

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    /// Stop-gradient surrogate around `x0`: hard gate frozen at `x0`, plus
    /// `σ(g̃(x)) (x̃(x0) - x0)` carrying the gate's derivative.
    fn surrogate(k: &MalaKernel, t: usize, x0: &[f64], x: &[f64]) -> Vec<f64> {
        let p0 = k.propose(t, x0);
        let p = k.propose(t, x);
        let g = if p0.accepted { 1.0 } else { 0.0 };
        let s = sigmoid(p.gate_logit);
        (0..x.len())
            .map(|i| g * p.proposal[i] + (1.0 - g) * x[i] + s * (p0.proposal[i] - x0[i]))
            .collect()
    }

    fn fd_jvp(k: &MalaKernel, t: usize, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let fp = surrogate(k, t, x, &xp);
        let fm = surrogate(k, t, x, &xm);
        fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-6);
        num / den
    }

    #[test]
    fn symmetric_fixed_point_accepts() {
        // On N(0, I) the proposal equals x when x = √(2ε) ξ / ε; then Δ = 0.
        let eps = 0.3;
        let k = MalaKernel::new(std_normal(2), eps, 0, 1).unwrap();
        let x: Vec<f64> = (0..2)
            .map(|i| (2.0 * eps as f64).sqrt() * k.noise().noise_at(0, "xi", i).unwrap() / eps)
            .collect();
        let p = k.propose(0, &x);
        assert!(p.proposal.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(p.delta.abs() < 1e-10);
        assert!(p.accepted);
    }

    #[test]
    fn near_unit_uniform_with_negative_delta_rejects() {
        let m = std_normal(2);
        let k = MalaKernel::new(m, 1.5, 4, 200).unwrap();
        let mut seen = 0;
        for t in 0..200 {
            let x = [2.0, -1.0];
            let p = k.propose(t, &x);
            let u = k.noise().scalar(t, k.u);
            // With u close to 1 any Δ < log u rejects.
            if p.delta < u.ln() {
                assert!(!p.accepted);
                assert_eq!(mala_step(&x, t, &k).unwrap(), x.to_vec());
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        let cov = [1.0, 0.6, 0.6, 2.0];
        let m: Arc<dyn TargetModel> = Arc::new(Gaussian::from_covariance(vec![0.5, -0.5], &cov).unwrap());
        let eps = 0.4;
        let k = MalaKernel::new(m.clone(), eps, 77, 10).unwrap();
        let prec = {
            let det = cov[0] * cov[3] - cov[1] * cov[2];
            [cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det]
        };
        let lp = |x: &[f64]| {
            let a = x[0] - 0.5;
            let b = x[1] + 0.5;
            -0.5 * (prec[0] * a * a + 2.0 * prec[1] * a * b + prec[3] * b * b)
        };
        let gr = |x: &[f64]| {
            let a = x[0] - 0.5;
            let b = x[1] + 0.5;
            [-(prec[0] * a + prec[1] * b), -(prec[2] * a + prec[3] * b)]
        };
        let mut x = vec![1.0, 1.0];
        for t in 0..10 {
            let xi = [k.noise().noise_at(t, "xi", 0).unwrap(), k.noise().noise_at(t, "xi", 1).unwrap()];
            let u = k.noise().noise_at(t, "u", 0).unwrap();
            let g = gr(&x);
            let y = [
                x[0] + eps * g[0] + (2.0f64 * eps).sqrt() * xi[0],
                x[1] + eps * g[1] + (2.0f64 * eps).sqrt() * xi[1],
            ];
            let gy = gr(&y);
            let lq = |a: &[f64], b: &[f64], gb: &[f64; 2]| {
                -((a[0] - b[0] - eps * gb[0]).powi(2) + (a[1] - b[1] - eps * gb[1]).powi(2)) / (4.0 * eps)
            };
            let log_alpha = (lp(&y) + lq(&x, &y, &gy) - lp(&x) - lq(&y, &x, &g)).min(0.0);
            let want = if u.ln() < log_alpha { y.to_vec() } else { x.clone() };
            let got = mala_step(&x, t, &k).unwrap();
            assert!(rel_err(&got, &want) < 1e-12, "t={t}");
            x = got;
        }
    }

    #[test]
    fn saturated_gates() {
        let m = std_normal(2);
        let k = MalaKernel::new(m, 0.05, 9, 400).unwrap();
        let v = [0.7, -0.3];
        let (mut acc, mut rej) = (0, 0);
        for t in 0..400 {
            let x = [0.3, 0.1];
            let p = k.propose(t, &x);
            let jv = mala_jvp(&x, &v, t, &k).unwrap();
            if p.delta >= 0.0 || p.gate_logit > 30.0 {
                // (I + εH) v with H = -I
                let want = [0.95 * v[0], 0.95 * v[1]];
                assert!(rel_err(&jv, &want) < 1e-8);
                acc += 1;
            } else if p.gate_logit < -30.0 {
                assert!(rel_err(&jv, &v) < 1e-8);
                rej += 1;
            }
        }
        assert!(acc > 100, "{acc} {rej}");
    }

    #[test]
    fn jvp_matches_stop_gradient_finite_differences_on_blr() {
        let (data, _) = synthetic_credit(3, 12, 3).unwrap();
        let m: Arc<dyn TargetModel> = Arc::new(BayesLogReg::new(data, 1.0).unwrap());
        let k = MalaKernel::new(m, 0.08, 5, 60).unwrap();
        let mut checked = 0;
        for t in 0..60 {
            let x: Vec<f64> = (0..3).map(|i| 0.5 * k.noise().noise_at((t + 1) % 60, "xi", i).unwrap()).collect();
            let v: Vec<f64> = (0..3).map(|i| k.noise().noise_at((t + 7) % 60, "xi", i).unwrap()).collect();
            let p = k.propose(t, &x);
            if p.gate_logit.abs() < 1e-3 {
                continue;
            }
            let jv = mala_jvp(&x, &v, t, &k).unwrap();
            let fd = fd_jvp(&k, t, &x, &v, 1e-6);
            assert!(rel_err(&jv, &fd) < 1e-4, "t={t}: {jv:?} vs {fd:?}");
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn jvp_matches_finite_differences_on_mog() {
        let m = ModelSpec::mog_default().build().unwrap();
        let k = MalaKernel::new(m, 0.5, 6, 100).unwrap();
        for t in 0..100 {
            let x = [3.0 * k.noise().noise_at((t + 3) % 100, "xi", 0).unwrap(), 2.0];
            let v = [0.4, -1.1];
            if k.propose(t, &x).gate_logit.abs() < 1e-3 {
                continue;
            }
            let jv = mala_jvp(&x, &v, t, &k).unwrap();
            assert!(rel_err(&jv, &fd_jvp(&k, t, &x, &v, 1e-6)) < 1e-4, "t={t}");
        }
    }

    #[test]
    fn dense_jacobian_columns_match_jvps() {
        let m = ModelSpec::mog_default().build().unwrap();
        let k = MalaKernel::new(m, 0.5, 6, 10).unwrap();
        let x = [1.0, -2.0];
        let mut jac = [0.0; 4];
        k.dense_jacobian(3, &x, &mut jac);
        for j in 0..2 {
            let mut e = [0.0; 2];
            e[j] = 1.0;
            let col = mala_jvp(&x, &e, 3, &k).unwrap();
            assert!((jac[j] - col[0]).abs() < 1e-15 && (jac[2 + j] - col[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(MalaKernel::new(std_normal(2), 0.0, 1, 10).is_err());
        let k = MalaKernel::new(std_normal(2), 0.1, 1, 10).unwrap();
        assert!(mala_step(&[0.0], 0, &k).is_err());
        assert!(mala_step(&[0.0, f64::NAN], 0, &k).is_err());
        assert!(mala_step(&[0.0, 0.0], 10, &k).is_err());
    }
}
