use super::GatedKernel;
use crate::error::{Error, Result};
use crate::noise::{Distribution, NoiseLayout, NoiseTable, SlotId};
use crate::sequence::InitialState;
use crate::system::TransitionSystem;

/// Per-group sufficient statistics: means `x̄_s`, within-group sums of
/// squares `SS_s = Σ_n (x_{s,n} - x̄_s)²`, and the common group size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EightSchoolsData {
    pub xbar: Vec<f64>,
    pub ss: Vec<f64>,
    pub n: usize,
}

/// Reported school effects and their standard errors.
const SCHOOL_MEANS: [f64; 8] = [28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0];
const SCHOOL_SES: [f64; 8] = [15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0];
const STUDENTS_PER_SCHOOL: usize = 20;

impl EightSchoolsData {
    /// The eight schools with 20 students each, whose sample mean is the
    /// reported effect and whose sample standard deviation is `se · √20`.
    pub fn standard() -> Self {
        let n = STUDENTS_PER_SCHOOL;
        let nf = n as f64;
        Self {
            xbar: SCHOOL_MEANS.to_vec(),
            ss: SCHOOL_SES.iter().map(|se| (nf - 1.0) * se * se * nf).collect(),
            n,
        }
    }

    /// Statistics of raw observations, one equally sized vector per group.
    pub fn from_observations(groups: &[Vec<f64>]) -> Result<Self> {
        let n = groups.first().map_or(0, Vec::len);
        if n < 2 || groups.iter().any(|g| g.len() != n) {
            return Err(Error::Config("groups must share a size of at least 2".into()));
        }
        let xbar: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n as f64).collect();
        let ss = groups
            .iter()
            .zip(&xbar)
            .map(|(g, m)| g.iter().map(|x| (x - m) * (x - m)).sum())
            .collect();
        Ok(Self { xbar, ss, n })
    }

    pub fn schools(&self) -> usize {
        self.xbar.len()
    }
}

/// Prior hyperparameters of the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsHyper {
    pub nu0: f64,
    pub tau0_sq: f64,
    pub mu0: f64,
    pub kappa0: f64,
    pub alpha0: f64,
    pub sigma0_sq: f64,
}

impl Default for GibbsHyper {
    fn default() -> Self {
        Self {
            nu0: 0.1,
            tau0_sq: 100.0,
            mu0: 0.0,
            kappa0: 0.1,
            alpha0: 0.1,
            sigma0_sq: 10.0,
        }
    }
}

/// Reparameterized Gibbs sweep over `(τ², μ, θ_1..θ_S, σ²_1..σ²_S)`.
///
/// Noise slots: `chi_tau` (one χ²(ν₀+S+1)), `xi_mu` (one normal), `xi_theta`
/// (S normals), `chi_sigma` (S χ²(α₀+N)).
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    data: EightSchoolsData,
    hyper: GibbsHyper,
    noise: NoiseTable,
    chi_tau: SlotId,
    xi_mu: SlotId,
    xi_theta: SlotId,
    chi_sigma: SlotId,
}

/// Which coordinate of the flat state a conditional refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Tau2,
    Mu,
    Theta(usize),
    Sigma2(usize),
}

impl GibbsKernel {
    pub fn layout(data: &EightSchoolsData, hyper: &GibbsHyper) -> NoiseLayout {
        let s = data.schools();
        NoiseLayout::new()
            .with_slot("chi_tau", 1, Distribution::ChiSquared(hyper.nu0 + s as f64 + 1.0))
            .with_slot("xi_mu", 1, Distribution::StandardNormal)
            .with_slot("xi_theta", s, Distribution::StandardNormal)
            .with_slot("chi_sigma", s, Distribution::ChiSquared(hyper.alpha0 + data.n as f64))
    }

    pub fn new(data: EightSchoolsData, hyper: GibbsHyper, seed: u64, steps: usize) -> Result<Self> {
        let noise = NoiseTable::new(seed, Self::layout(&data, &hyper), steps)?.materialize();
        Self::with_noise(data, hyper, noise)
    }

    pub fn with_noise(data: EightSchoolsData, hyper: GibbsHyper, noise: NoiseTable) -> Result<Self> {
        let h = hyper;
        if !(h.nu0 > 0.0 && h.tau0_sq > 0.0 && h.kappa0 > 0.0 && h.alpha0 > 0.0 && h.sigma0_sq > 0.0) {
            return Err(Error::Config("Gibbs hyperparameters must be positive".into()));
        }
        if data.schools() == 0 || data.ss.len() != data.schools() || data.n == 0 {
            return Err(Error::Config("Gibbs data needs at least one non-empty group".into()));
        }
        let s = data.schools();
        let chi_tau = noise.slot("chi_tau")?;
        let xi_mu = noise.slot("xi_mu")?;
        let xi_theta = noise.slot("xi_theta")?;
        let chi_sigma = noise.slot("chi_sigma")?;
        if noise.slot_count(xi_theta) != s || noise.slot_count(chi_sigma) != s {
            return Err(Error::Config("Gibbs noise layout does not match the number of groups".into()));
        }
        Ok(Self {
            data,
            hyper,
            noise,
            chi_tau,
            xi_mu,
            xi_theta,
            chi_sigma,
        })
    }

    pub fn data(&self) -> &EightSchoolsData {
        &self.data
    }

    pub fn hyper(&self) -> &GibbsHyper {
        &self.hyper
    }

    pub fn noise(&self) -> &NoiseTable {
        &self.noise
    }

    /// Data-driven start: `τ²` the spread of group means, `μ` their average,
    /// `θ_s = x̄_s`, `σ²_s` the within-group sample variance.
    pub fn initial_state(&self) -> InitialState {
        let s = self.data.schools();
        let mean = self.data.xbar.iter().sum::<f64>() / s as f64;
        let spread = self.data.xbar.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s as f64;
        let mut st = vec![spread.max(1.0), mean];
        st.extend_from_slice(&self.data.xbar);
        let denom = (self.data.n.max(2) - 1) as f64;
        st.extend(self.data.ss.iter().map(|ss| (ss / denom).max(1e-6)));
        InitialState::new(st).expect("finite start")
    }

    /// Forward sweep plus JVPs for every tangent.
    fn sweep(&self, t: usize, st: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        let s = self.data.schools();
        let dim = 2 * s + 2;
        let h = &self.hyper;
        let nf = self.data.n as f64;
        let mu = st[1];
        let theta = &st[2..2 + s];
        let sig2 = &st[2 + s..];

        let g_tau = self.noise.scalar(t, self.chi_tau);
        let xi_mu = self.noise.scalar(t, self.xi_mu);
        let mut xi_th = vec![0.0; s];
        let mut g_sig = vec![0.0; s];
        self.noise.fill(t, self.xi_theta, &mut xi_th);
        self.noise.fill(t, self.chi_sigma, &mut g_sig);

        // τ² | μ, θ
        let num_tau = h.nu0 * h.tau0_sq
            + h.kappa0 * (mu - h.mu0).powi(2)
            + theta.iter().map(|th| (th - mu).powi(2)).sum::<f64>();
        let tau2n = num_tau / g_tau;
        // μ | θ, τ²
        let c = h.kappa0 + s as f64;
        let sd_mu = (tau2n / c).sqrt();
        let mun = (h.kappa0 * h.mu0 + theta.iter().sum::<f64>()) / c + xi_mu * sd_mu;
        next[0] = tau2n;
        next[1] = mun;
        let mut prec = vec![0.0; s];
        let mut lin = vec![0.0; s];
        for k in 0..s {
            // θ_s | μ, τ², σ²_s
            let p = 1.0 / tau2n + nf / sig2[k];
            let a = mun / tau2n + nf * self.data.xbar[k] / sig2[k];
            let th = a / p + xi_th[k] / p.sqrt();
            prec[k] = p;
            lin[k] = a;
            next[2 + k] = th;
            // σ²_s | θ_s
            next[2 + s + k] =
                (h.alpha0 * h.sigma0_sq + self.data.ss[k] + nf * (self.data.xbar[k] - th).powi(2)) / g_sig[k];
        }
        if next.iter().any(|v| !v.is_finite()) || next[0] <= 0.0 || next[2 + s..].iter().any(|v| *v <= 0.0) {
            next.fill(f64::NAN);
            out.fill(f64::NAN);
            return;
        }

        for (v, o) in tangents.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let dmu = v[1];
            let dtheta = &v[2..2 + s];
            let dsig2 = &v[2 + s..];
            let dtau2n = (2.0 * h.kappa0 * (mu - h.mu0) * dmu
                + 2.0 * theta.iter().zip(dtheta).map(|(th, dth)| (th - mu) * (dth - dmu)).sum::<f64>())
                / g_tau;
            let dmun = dtheta.iter().sum::<f64>() / c + xi_mu * dtau2n / (2.0 * (tau2n * c).sqrt());
            o[0] = dtau2n;
            o[1] = dmun;
            for k in 0..s {
                let p = prec[k];
                let a = lin[k];
                let sg = sig2[k];
                let dp = -dtau2n / (tau2n * tau2n) - nf * dsig2[k] / (sg * sg);
                let da = dmun / tau2n - mun * dtau2n / (tau2n * tau2n) - nf * self.data.xbar[k] * dsig2[k] / (sg * sg);
                let dth = da / p - a * dp / (p * p) - 0.5 * xi_th[k] * p.powf(-1.5) * dp;
                o[2 + k] = dth;
                o[2 + s + k] = -2.0 * nf * (self.data.xbar[k] - next[2 + k]) * dth / g_sig[k];
            }
        }
    }
}

impl TransitionSystem for GibbsKernel {
    fn dim(&self) -> usize {
        2 * self.data.schools() + 2
    }

    fn steps(&self) -> usize {
        self.noise.steps()
    }

    fn step(&self, t: usize, prev: &[f64], next: &mut [f64]) {
        self.sweep(t, prev, &[], next, &mut []);
    }

    fn jvp(&self, t: usize, prev: &[f64], tangent: &[f64], out: &mut [f64]) {
        let mut next = vec![0.0; prev.len()];
        self.sweep(t, prev, tangent, &mut next, out);
    }

    fn step_jvps(&self, t: usize, prev: &[f64], tangents: &[f64], next: &mut [f64], out: &mut [f64]) {
        self.sweep(t, prev, tangents, next, out);
    }

    fn dense_jacobian(&self, t: usize, prev: &[f64], out: &mut [f64]) {
        let d = prev.len();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let mut cols = vec![0.0; d * d];
        let mut next = vec![0.0; d];
        self.sweep(t, prev, &eye, &mut next, &mut cols);
        for j in 0..d {
            for i in 0..d {
                out[i * d + j] = cols[j * d + i];
            }
        }
    }
}

/// Every Gibbs sweep moves the state, so each step counts as accepted.
impl GatedKernel for GibbsKernel {
    fn accepts(&self, _t: usize, _prev: &[f64]) -> bool {
        true
    }
}

fn check_gibbs_state(st: &[f64], kernel: &GibbsKernel) -> Result<()> {
    let d = kernel.dim();
    if st.len() != d {
        return Err(Error::Structure(format!("Gibbs state has length {}, expected {d}", st.len())));
    }
    let s = kernel.data.schools();
    if !(st[0] > 0.0) || st[2 + s..].iter().any(|v| !(*v > 0.0)) || st.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("Gibbs state needs finite values and positive variances".into()));
    }
    Ok(())
}

/// One full sweep `τ² → μ → θ → σ²` at step `t`.
pub fn gibbs_sweep(st: &[f64], t: usize, kernel: &GibbsKernel) -> Result<Vec<f64>> {
    check_gibbs_state(st, kernel)?;
    let mut next = vec![0.0; st.len()];
    kernel.step(t, st, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            t,
            detail: "Gibbs sweep produced a non-positive variance".into(),
        });
    }
    Ok(next)
}

/// Directional derivative of the reparameterized sweep.
pub fn gibbs_jvp(st: &[f64], v: &[f64], t: usize, kernel: &GibbsKernel) -> Result<Vec<f64>> {
    check_gibbs_state(st, kernel)?;
    if v.len() != st.len() {
        return Err(Error::Structure(format!("tangent has length {}, state {}", v.len(), st.len())));
    }
    let mut out = vec![0.0; st.len()];
    kernel.jvp(t, st, v, &mut out);
    Ok(out)
}

/// Unnormalized log joint density of parameters and data.
pub fn log_joint(st: &[f64], data: &EightSchoolsData, hyper: &GibbsHyper) -> f64 {
    let s = data.schools();
    let nf = data.n as f64;
    let (tau2, mu) = (st[0], st[1]);
    let h = hyper;
    let mut lp = -(0.5 * h.nu0 + 1.0) * tau2.ln() - h.nu0 * h.tau0_sq / (2.0 * tau2);
    lp += -0.5 * tau2.ln() - h.kappa0 * (mu - h.mu0).powi(2) / (2.0 * tau2);
    for k in 0..s {
        let th = st[2 + k];
        let sg = st[2 + s + k];
        lp += -0.5 * tau2.ln() - (th - mu).powi(2) / (2.0 * tau2);
        lp += -(0.5 * h.alpha0 + 1.0) * sg.ln() - h.alpha0 * h.sigma0_sq / (2.0 * sg);
        lp += -0.5 * nf * sg.ln() - (data.ss[k] + nf * (data.xbar[k] - th).powi(2)) / (2.0 * sg);
    }
    lp
}

fn scaled_inv_chi2_logpdf(x: f64, df: f64, scale: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    0.5 * df * (0.5 * df * scale).ln() - ln_gamma(0.5 * df) - (0.5 * df + 1.0) * x.ln() - df * scale / (2.0 * x)
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (std::f64::consts::TAU * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

/// Log-density at `value` of the full conditional of `coord` given the rest of `st`.
pub fn conditional_logpdf(
    coord: Coordinate,
    st: &[f64],
    value: f64,
    data: &EightSchoolsData,
    hyper: &GibbsHyper,
) -> f64 {
    let s = data.schools();
    let nf = data.n as f64;
    let h = hyper;
    let (tau2, mu) = (st[0], st[1]);
    let theta = &st[2..2 + s];
    match coord {
        Coordinate::Tau2 => {
            let df = h.nu0 + s as f64 + 1.0;
            let num =
                h.nu0 * h.tau0_sq + h.kappa0 * (mu - h.mu0).powi(2) + theta.iter().map(|t| (t - mu).powi(2)).sum::<f64>();
            scaled_inv_chi2_logpdf(value, df, num / df)
        }
        Coordinate::Mu => {
            let c = h.kappa0 + s as f64;
            normal_logpdf(value, (h.kappa0 * h.mu0 + theta.iter().sum::<f64>()) / c, tau2 / c)
        }
        Coordinate::Theta(k) => {
            let sg = st[2 + s + k];
            let p = 1.0 / tau2 + nf / sg;
            normal_logpdf(value, (mu / tau2 + nf * data.xbar[k] / sg) / p, 1.0 / p)
        }
        Coordinate::Sigma2(k) => {
            let df = h.alpha0 + nf;
            let num = h.alpha0 * h.sigma0_sq + data.ss[k] + nf * (data.xbar[k] - theta[k]).powi(2);
            scaled_inv_chi2_logpdf(value, df, num / df)
        }
    }
}
