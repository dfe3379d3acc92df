use super::{check_dim, ref_normal, TargetModel};
use crate::error::{Error, Result};
use crate::linalg;

/// `N(0, I)`.
#[derive(Debug, Clone)]
pub struct StdNormal {
    dim: usize,
}

impl StdNormal {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("std-normal needs dim >= 1".into()));
        }
        Ok(Self { dim })
    }
}

impl TargetModel for StdNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp(&self, x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -v;
        }
    }

    fn hvp(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(v) {
            *o = -w;
        }
    }

    fn exact_sample(&self, seed: u64, i: usize, out: &mut [f64]) -> bool {
        for (k, o) in out.iter_mut().enumerate() {
            *o = ref_normal(seed, i, k);
        }
        true
    }
}

/// `N(μ, Λ⁻¹)` with precision `Λ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    chol: Vec<f64>,
    precision: Vec<f64>,
}

impl Gaussian {
    pub fn from_precision_cholesky(mean: Vec<f64>, chol: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Config("gaussian needs a non-empty mean".into()));
        }
        check_dim("precision cholesky factor", chol.len(), d * d)?;
        for i in 0..d {
            if !(chol[i * d + i] > 0.0) {
                return Err(Error::Config(format!("cholesky diagonal entry {i} must be positive")));
            }
            for j in i + 1..d {
                if chol[i * d + j] != 0.0 {
                    return Err(Error::Config("cholesky factor must be lower-triangular".into()));
                }
            }
        }
        let precision = linalg::matmul(&chol, &linalg::transpose(&chol, d), d);
        Ok(Self { mean, chol, precision })
    }

    pub fn from_covariance(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        check_dim("covariance", cov.len(), d * d)?;
        // Λ = Σ⁻¹, assembled column by column from the covariance factor.
        let lc = linalg::cholesky(cov, d)?;
        let mut prec = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.fill(0.0);
            e[j] = 1.0;
            linalg::solve_lower(&lc, d, &mut e);
            linalg::solve_lower_transpose(&lc, d, &mut e);
            for i in 0..d {
                prec[i * d + j] = e[i];
            }
        }
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (prec[i * d + j] + prec[j * d + i]);
                prec[i * d + j] = m;
                prec[j * d + i] = m;
            }
        }
        let chol = linalg::cholesky(&prec, d)?;
        Self::from_precision_cholesky(mean, chol)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn precision_cholesky(&self) -> &[f64] {
        &self.chol
    }
}

impl TargetModel for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logp(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut w = vec![0.0; d];
        linalg::matvec_transpose(&self.chol, d, &diff, &mut w);
        -0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| b - a).collect();
        linalg::matvec(&self.precision, d, &diff, out);
    }

    fn hvp(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        linalg::matvec(&self.precision, self.dim(), v, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }

    fn exact_sample(&self, seed: u64, i: usize, out: &mut [f64]) -> bool {
        let d = self.dim();
        for (k, o) in out.iter_mut().enumerate() {
            *o = ref_normal(seed, i, k);
        }
        // Lᵀ (x - μ) = z has covariance (L Lᵀ)⁻¹.
        linalg::solve_lower_transpose(&self.chol, d, out);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
        true
    }
}
