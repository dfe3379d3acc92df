//! Sample-quality and chain diagnostics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::StateSequence;

/// Kernel sums are accumulated over square tiles of this many points per side.
pub const MMD_TILE: usize = 128;

/// `M x D` point cloud, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Vec<f64>,
    len: usize,
    dim: usize,
}

impl SampleSet {
    pub fn new(points: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 || points.len() != len * dim {
            return Err(Error::Structure(format!(
                "sample set needs {len}x{dim} > 0 values, got {}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("sample set contains non-finite values".into()));
        }
        Ok(Self { points, len, dim })
    }

    pub fn from_sequence(s: &StateSequence) -> Result<Self> {
        Self::new(s.as_slice().to_vec(), s.len(), s.dim())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut points = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            points.extend_from_slice(self.row(i));
        }
        Self {
            points,
            len: idx.len(),
            dim: self.dim,
        }
    }

    /// `n` distinct rows drawn uniformly (all rows when `n ≥ len`).
    pub fn subsample(&self, n: usize, rng: &mut ChaCha8Rng) -> Self {
        if n >= self.len {
            return self.clone();
        }
        let mut idx = sample(rng, self.len, n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Gaussian RBF kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
}

impl KernelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Contract(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Sum of `k(a_i, b_j)` over all pairs, skipping `i == j` when `skip_diag`.
/// Tiles are evaluated in parallel and reduced in a fixed order.
fn kernel_sum(a: &SampleSet, b: &SampleSet, k: KernelParams, skip_diag: bool) -> f64 {
    let ta = a.len.div_ceil(MMD_TILE);
    let tb = b.len.div_ceil(MMD_TILE);
    let partials: Vec<f64> = (0..ta * tb)
        .into_par_iter()
        .map(|tile| {
            let (ti, tj) = (tile / tb, tile % tb);
            let mut s = 0.0;
            for i in ti * MMD_TILE..((ti + 1) * MMD_TILE).min(a.len) {
                let ra = a.row(i);
                for j in tj * MMD_TILE..((tj + 1) * MMD_TILE).min(b.len) {
                    if skip_diag && i == j {
                        continue;
                    }
                    s += k.eval(ra, b.row(j));
                }
            }
            s
        })
        .collect();
    partials.iter().sum()
}

/// Unbiased estimate of `MMD²(P, Q)` from `X ~ P` and `Y ~ Q`.
pub fn mmd_unbiased(x: &SampleSet, y: &SampleSet, sigma: f64) -> Result<f64> {
    let k = KernelParams::new(sigma)?;
    let (n, m) = (x.len, y.len);
    if n < 2 || m < 2 {
        return Err(Error::Contract(format!("MMD needs at least two points per set, got {n} and {m}")));
    }
    if x.dim != y.dim {
        return Err(Error::Structure(format!("sample dimensions differ: {} vs {}", x.dim, y.dim)));
    }
    let (nf, mf) = (n as f64, m as f64);
    let kxx = kernel_sum(x, x, k, true) / (nf * (nf - 1.0));
    let kyy = kernel_sum(y, y, k, true) / (mf * (mf - 1.0));
    let kxy = kernel_sum(x, y, k, false) / (nf * mf);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Mean and spread of MMD² over random subsamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub mmd2: f64,
    /// Standard deviation of the replicates.
    pub se: f64,
    pub sigma: f64,
    pub subsample: usize,
    pub reps: usize,
    pub seed: u64,
    pub replicates: Vec<f64>,
}

/// MMD² over `reps` replicate pairs of `min(len, subsample)` rows drawn
/// without replacement from each set. With `reps = 1` and `subsample ≥` both
/// lengths this is exactly [`mmd_unbiased`].
pub fn mmd_subsampled(
    x: &SampleSet,
    y: &SampleSet,
    sigma: f64,
    subsample: usize,
    reps: usize,
    seed: u64,
) -> Result<MmdEstimate> {
    if reps == 0 {
        return Err(Error::Contract("MMD needs at least one replicate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replicates = Vec::with_capacity(reps);
    for _ in 0..reps {
        let xs = x.subsample(subsample, &mut rng);
        let ys = y.subsample(subsample, &mut rng);
        replicates.push(mmd_unbiased(&xs, &ys, sigma)?);
    }
    let (mean, sd) = mean_sd(&replicates);
    Ok(MmdEstimate {
        mmd2: mean,
        se: sd,
        sigma,
        subsample,
        reps,
        seed,
        replicates,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean over `reps` subsamples of the median pairwise Euclidean distance.
pub fn median_heuristic(y: &SampleSet, subsample: usize, reps: usize, seed: u64) -> Result<f64> {
    if y.len < 2 || subsample < 2 || reps == 0 {
        return Err(Error::Contract("median heuristic needs at least two points and one replicate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..reps {
        let s = y.subsample(subsample, &mut rng);
        let mut d = Vec::with_capacity(s.len * (s.len - 1) / 2);
        for i in 0..s.len {
            for j in i + 1..s.len {
                let d2: f64 = s.row(i).iter().zip(s.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                d.push(d2.sqrt());
            }
        }
        total += median(&mut d);
    }
    let sigma = total / reps as f64;
    if !(sigma > 0.0) {
        return Err(Error::Contract("median pairwise distance is zero".into()));
    }
    Ok(sigma)
}

/// Per-dimension effective sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub per_dim: Vec<f64>,
    pub min: f64,
    pub mean: f64,
}

/// Effective sample size of one scalar series (Geyer initial monotone
/// positive sequence). The integrated autocorrelation time is floored at
/// `1 / log10(T)`, so ESS never exceeds `T·log10(T)`.
pub fn ess_1d(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 8 {
        return Err(Error::Contract(format!("ESS needs at least 8 draws, got {n}")));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let autocov = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / nf;
    let g0 = autocov(0);
    if !(g0 > 0.0) || !g0.is_finite() {
        return Err(Error::Contract("ESS undefined for a zero-variance chain".into()));
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = (autocov(k) + autocov(k + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / nf.log10());
    Ok(nf / tau)
}

pub fn ess(chain: &StateSequence) -> Result<EssReport> {
    let per_dim = (0..chain.dim())
        .into_par_iter()
        .map(|d| ess_1d(&chain.column(d)))
        .collect::<Result<Vec<_>>>()?;
    let min = per_dim.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
    Ok(EssReport { per_dim, min, mean })
}

/// Elementwise `|a - b|` reduced per step and globally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceError {
    pub max_abs: f64,
    pub per_step: Vec<f64>,
}

pub fn trace_error(a: &StateSequence, b: &StateSequence) -> Result<TraceError> {
    a.same_shape(b)?;
    let per_step: Vec<f64> = a
        .steps()
        .zip(b.steps())
        .map(|(x, y)| x.iter().zip(y).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs())))
        .collect();
    let max_abs = per_step.iter().copied().fold(0.0, f64::max);
    Ok(TraceError { max_abs, per_step })
}

pub fn acceptance_rate(gates: &[bool]) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::Contract("acceptance rate of an empty gate sequence".into()));
    }
    Ok(gates.iter().filter(|g| **g).count() as f64 / gates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::ref_normal as rn;

    fn cloud(seed: u64, n: usize, d: usize, shift: f64) -> SampleSet {
        let pts = (0..n * d).map(|i| rn(seed, i / d, i % d) + shift).collect();
        SampleSet::new(pts, n, d).unwrap()
    }

    fn naive(x: &SampleSet, y: &SampleSet, sigma: f64) -> f64 {
        let k = KernelParams::new(sigma).unwrap();
        let (n, m) = (x.len(), y.len());
        let mut sxx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sxx += k.eval(x.row(i), x.row(j));
                }
            }
        }
        let mut syy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    syy += k.eval(y.row(i), y.row(j));
                }
            }
        }
        let mut sxy = 0.0;
        for i in 0..n {
            for j in 0..m {
                sxy += k.eval(x.row(i), y.row(j));
            }
        }
        let (nf, mf) = (n as f64, m as f64);
        sxx / (nf * (nf - 1.0)) + syy / (mf * (mf - 1.0)) - 2.0 * sxy / (nf * mf)
    }

    #[test]
    fn two_point_algebra() {
        let a = [0.0, 0.0];
        let b = [1.0, 1.0];
        let x = SampleSet::new([a, b].concat(), 2, 2).unwrap();
        // ‖a − b‖² = 2 = 2σ² at σ = 1.
        let got = mmd_unbiased(&x, &x, 1.0).unwrap();
        assert!((got - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        let same = SampleSet::new([a, a].concat(), 2, 2).unwrap();
        assert_eq!(mmd_unbiased(&same, &same, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn tiled_matches_naive() {
        let x = cloud(1, 200, 3, 0.0);
        let y = cloud(2, 257, 3, 0.3);
        let got = mmd_unbiased(&x, &y, 1.3).unwrap();
        assert!((got - naive(&x, &y, 1.3)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_across_pool_sizes() {
        let x = cloud(3, 300, 2, 0.0);
        let y = cloud(4, 300, 2, 0.1);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| mmd_unbiased(&x, &y, 1.0).unwrap());
        let b = four.install(|| mmd_unbiased(&x, &y, 1.0).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mmd_contract_errors() {
        let one = cloud(1, 1, 2, 0.0);
        let two = cloud(1, 2, 2, 0.0);
        assert!(matches!(mmd_unbiased(&one, &two, 1.0), Err(Error::Contract(_))));
        assert!(matches!(mmd_unbiased(&two, &two, 0.0), Err(Error::Contract(_))));
        assert!(SampleSet::new(vec![f64::NAN, 0.0], 1, 2).is_err());
    }

    #[test]
    fn unbiased_over_disjoint_splits() {
        let mut vals = Vec::new();
        for s in 0..50 {
            let x = cloud(100 + s, 200, 2, 0.0);
            let y = cloud(500 + s, 200, 2, 0.0);
            vals.push(mmd_unbiased(&x, &y, 1.0).unwrap());
        }
        let (mean, sd) = mean_sd(&vals);
        let se = sd / (vals.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean} vs {se}");
    }

    #[test]
    fn separated_sets_have_positive_mmd() {
        let x = cloud(1, 200, 2, 0.0);
        let y = cloud(2, 200, 2, 1.0);
        assert!(mmd_unbiased(&x, &y, 1.0).unwrap() > 0.1);
    }

    #[test]
    fn full_subsample_equals_direct() {
        let x = cloud(5, 50, 2, 0.0);
        let y = cloud(6, 60, 2, 0.2);
        let e = mmd_subsampled(&x, &y, 1.0, 100, 1, 0).unwrap();
        assert_eq!(e.mmd2, mmd_unbiased(&x, &y, 1.0).unwrap());
        let e = mmd_subsampled(&x, &y, 1.0, 20, 10, 0).unwrap();
        assert_eq!(e.replicates.len(), 10);
        assert!(e.se > 0.0);
    }

    #[test]
    fn median_heuristic_small_cases() {
        let two = SampleSet::new(vec![0.0, 0.0, 3.0, 0.0], 2, 2).unwrap();
        assert_eq!(median_heuristic(&two, 10, 3, 0).unwrap(), 3.0);
        let three = SampleSet::new(vec![0.0, 1.0, 2.0], 3, 1).unwrap();
        assert_eq!(median_heuristic(&three, 3, 1, 0).unwrap(), 1.0);
        let flat = SampleSet::new(vec![1.0; 8], 4, 2).unwrap();
        assert!(matches!(median_heuristic(&flat, 4, 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn median_heuristic_stable_across_seeds() {
        let y = cloud(9, 5000, 8, 0.0);
        let vals: Vec<f64> = (0..5).map(|s| median_heuristic(&y, 500, 10, s).unwrap()).collect();
        let (mean, _) = mean_sd(&vals);
        assert!(vals.iter().all(|v| (v - mean).abs() / mean < 0.02), "{vals:?}");
        // Median distance of two N(0, I_8) points is close to sqrt(2·8).
        assert!((mean - 4.0).abs() < 0.3);
    }

    fn seq(x: Vec<f64>) -> StateSequence {
        let n = x.len();
        StateSequence::from_vec(x, n, 1).unwrap()
    }

    #[test]
    fn ess_iid() {
        let n = 100_000;
        let e = ess(&seq((0..n).map(|i| rn(11, i, 0)).collect())).unwrap();
        let r = e.min / n as f64;
        assert!((0.9..=1.1).contains(&r), "{r}");
    }

    #[test]
    fn ess_alternating_exceeds_length() {
        let n = 1000;
        let e = ess_1d(&(0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect::<Vec<_>>()).unwrap();
        assert!(e >= n as f64);
    }

    #[test]
    fn ess_ar1() {
        let n = 100_000;
        let rho: f64 = 0.9;
        let mut x = vec![0.0; n];
        x[0] = rn(12, 0, 0) / (1.0 - rho * rho).sqrt();
        for t in 1..n {
            x[t] = rho * x[t - 1] + rn(12, t, 0);
        }
        let r = ess_1d(&x).unwrap() / n as f64;
        let want = (1.0 - rho) / (1.0 + rho);
        assert!((r / want - 1.0).abs() < 0.15, "{r} vs {want}");
    }

    #[test]
    fn ess_affine_invariant_and_errors() {
        let x: Vec<f64> = (0..500).map(|i| rn(13, i, 0) + 0.5 * rn(13, i / 3, 1)).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v - 2.0).collect();
        let (a, b) = (ess_1d(&x).unwrap(), ess_1d(&y).unwrap());
        assert!((a - b).abs() / a < 1e-9);
        assert!(matches!(ess_1d(&[1.0; 20]), Err(Error::Contract(_))));
        assert!(ess_1d(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn trace_error_examples() {
        let a = StateSequence::from_vec(vec![0.0; 12], 4, 3).unwrap();
        assert_eq!(trace_error(&a, &a).unwrap().max_abs, 0.0);
        let mut b = a.clone();
        b.step_mut(2)[1] = 0.25;
        let e = trace_error(&a, &b).unwrap();
        assert_eq!(e.max_abs, 0.25);
        assert_eq!(e.per_step, vec![0.0, 0.0, 0.25, 0.0]);
        assert!(trace_error(&a, &StateSequence::zeros(4, 2).unwrap()).is_err());
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_rate(&[true; 5]).unwrap(), 1.0);
        let alt: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert_eq!(acceptance_rate(&alt).unwrap(), 0.5);
        assert!(acceptance_rate(&[]).is_err());
    }
}
