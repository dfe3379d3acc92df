use super::{ref_normal, ref_uniform, TargetModel};
use crate::error::{Error, Result};

/// Mixture of isotropic Gaussians.
#[derive(Debug, Clone)]
pub struct MixtureOfGaussians {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl MixtureOfGaussians {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/variances, got {k}/{}/{}",
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must sum to 1".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a non-zero dimension".into()));
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            means,
            variances,
            dim,
        })
    }

    /// Per-component log terms and their log-sum-exp.
    fn log_terms(&self, x: &[f64], terms: &mut [f64]) -> f64 {
        let half_d = 0.5 * self.dim as f64;
        for (k, t) in terms.iter_mut().enumerate() {
            let s = self.variances[k];
            let sq: f64 = x.iter().zip(&self.means[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            *t = self.log_weights[k] - sq / (2.0 * s) - half_d * (std::f64::consts::TAU * s).ln();
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
    }

    /// Responsibilities overwrite `terms`; returns log p.
    fn responsibilities(&self, x: &[f64], terms: &mut [f64]) -> f64 {
        let lse = self.log_terms(x, terms);
        for t in terms.iter_mut() {
            *t = (*t - lse).exp();
        }
        lse
    }
}

impl TargetModel for MixtureOfGaussians {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp(&self, x: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.weights.len()];
        self.log_terms(x, &mut terms)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.logp_grad(x, out);
    }

    fn logp_grad(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let mut r = vec![0.0; self.weights.len()];
        let lp = self.responsibilities(x, &mut r);
        out.fill(0.0);
        for (k, rk) in r.iter().enumerate() {
            let s = self.variances[k];
            for i in 0..self.dim {
                out[i] -= rk * (x[i] - self.means[k][i]) / s;
            }
        }
        lp
    }

    fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.dim];
        self.logp_grad_hvp(x, v, &mut g, out);
    }

    fn logp_grad_hvp(&self, x: &[f64], v: &[f64], grad: &mut [f64], hv: &mut [f64]) -> f64 {
        // H = Σ r_k (g_k g_kᵀ - I/s_k) - g gᵀ with g_k = -(x - m_k)/s_k.
        let d = self.dim;
        let mut r = vec![0.0; self.weights.len()];
        let lp = self.responsibilities(x, &mut r);
        grad.fill(0.0);
        hv.fill(0.0);
        let mut gk = vec![0.0; d];
        for (k, rk) in r.iter().enumerate() {
            let s = self.variances[k];
            for i in 0..d {
                gk[i] = -(x[i] - self.means[k][i]) / s;
            }
            let gv: f64 = gk.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 0..d {
                grad[i] += rk * gk[i];
                hv[i] += rk * (gk[i] * gv - v[i] / s);
            }
        }
        let gv: f64 = grad.iter().zip(v).map(|(a, b)| a * b).sum();
        for i in 0..d {
            hv[i] -= grad[i] * gv;
        }
        lp
    }

    fn exact_sample(&self, seed: u64, i: usize, out: &mut [f64]) -> bool {
        let u = ref_uniform(seed, i, self.dim);
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.means[k][c] + sd * ref_normal(seed, i, c);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::super::{fd, ModelSpec};
    use super::*;

    #[test]
    fn matches_finite_differences_at_random_points() {
        let m = ModelSpec::mog_default().build().unwrap();
        for i in 0..100 {
            let x = [4.0 * ref_normal(21, i, 0), 4.0 * ref_normal(21, i, 1)];
            let v = [ref_normal(22, i, 0), ref_normal(22, i, 1)];
            let mut g = [0.0; 2];
            m.grad(&x, &mut g);
            assert!(fd::rel_err(&g, &fd::grad(m.as_ref(), &x, 1e-6)) < 1e-5);
            let mut hv = [0.0; 2];
            m.hvp(&x, &v, &mut hv);
            assert!(fd::rel_err(&hv, &fd::hvp(m.as_ref(), &x, &v, 1e-6)) < 1e-5);
        }
    }

    #[test]
    fn finite_on_wide_grid() {
        let m = ModelSpec::mog_default().build().unwrap();
        let mut g = [0.0; 2];
        for i in -130..=130 {
            for j in -130..=130 {
                let x = [i as f64 * 0.1, j as f64 * 0.1];
                assert!(m.logp(&x).is_finite());
                m.grad(&x, &mut g);
                assert!(g.iter().all(|v| v.is_finite()));
            }
        }
        assert!(m.logp(&[1e3, -1e3]).is_finite());
    }

    #[test]
    fn logp_continuous_across_grid() {
        let m = ModelSpec::mog_default().build().unwrap();
        let h = 1e-3;
        for i in -13..=13 {
            let x = [i as f64, 0.5];
            assert!((m.logp(&x) - m.logp(&[x[0] + h, x[1]])).abs() < 0.05);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MixtureOfGaussians::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(MixtureOfGaussians::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(MixtureOfGaussians::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
    }
}
