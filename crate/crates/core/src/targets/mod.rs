//! Target log-densities with analytic gradients and Hessian-vector products.

mod basis;
mod blr;
mod gaussian;
mod mog;
mod rosenbrock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{noise_value, Distribution};
use crate::sequence::StateSequence;

pub use basis::{orthogonal_basis, transform_system, OrthogonalBasis, TransformedSystem};
pub use blr::{load_design_matrix, synthetic_credit, BayesLogReg, Dataset};
pub use gaussian::{Gaussian, StdNormal};
pub use mog::MixtureOfGaussians;
pub use rosenbrock::Rosenbrock;

/// An unnormalized log-density on `R^D`.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn logp(&self, x: &[f64]) -> f64;

    fn grad(&self, x: &[f64], out: &mut [f64]);

    /// `∇² log p(x) v`.
    fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Log-density and gradient in one pass.
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.grad(x, grad);
        self.logp(x)
    }

    /// Log-density, gradient and one HVP in one pass.
    fn logp_grad_hvp(&self, x: &[f64], v: &[f64], grad: &mut [f64], hv: &mut [f64]) -> f64 {
        self.hvp(x, v, hv);
        self.logp_grad(x, grad)
    }

    /// Fill `out` with an exact draw using the `i`-th entry of the
    /// deterministic stream `seed`. Returns false when no exact sampler exists.
    fn exact_sample(&self, _seed: u64, _i: usize, _out: &mut [f64]) -> bool {
        false
    }
}

/// Serializable description of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    StdNormal {
        dim: usize,
    },
    Gaussian {
        mean: Vec<f64>,
        /// Row-major lower-triangular `L` with precision `L Lᵀ`.
        precision_cholesky: Vec<f64>,
    },
    Rosenbrock {
        a: f64,
        b: f64,
        var1: f64,
        var2: f64,
    },
    Mog {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    Blr {
        data: Dataset,
        prior_precision: f64,
    },
}

impl ModelSpec {
    pub fn rosenbrock_default() -> Self {
        ModelSpec::Rosenbrock {
            a: 0.0,
            b: 1.0,
            var1: 1.0,
            var2: 0.1,
        }
    }

    /// Four unit-variance components at `(±3, ±3)` with equal weights.
    pub fn mog_default() -> Self {
        ModelSpec::Mog {
            weights: vec![0.25; 4],
            means: vec![vec![3.0, 3.0], vec![3.0, -3.0], vec![-3.0, 3.0], vec![-3.0, -3.0]],
            variances: vec![1.0; 4],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::StdNormal { dim } => *dim,
            ModelSpec::Gaussian { mean, .. } => mean.len(),
            ModelSpec::Rosenbrock { .. } => 2,
            ModelSpec::Mog { means, .. } => means.first().map_or(0, Vec::len),
            ModelSpec::Blr { data, .. } => data.d,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::StdNormal { .. } => "std-normal",
            ModelSpec::Gaussian { .. } => "gaussian",
            ModelSpec::Rosenbrock { .. } => "rosenbrock",
            ModelSpec::Mog { .. } => "mog",
            ModelSpec::Blr { .. } => "blr",
        }
    }

    pub fn build(&self) -> Result<Arc<dyn TargetModel>> {
        model_logp_grad_hvp(self)
    }
}

/// Build the model described by `spec`, validating it first.
pub fn model_logp_grad_hvp(spec: &ModelSpec) -> Result<Arc<dyn TargetModel>> {
    Ok(match spec {
        ModelSpec::StdNormal { dim } => Arc::new(StdNormal::new(*dim)?),
        ModelSpec::Gaussian {
            mean,
            precision_cholesky,
        } => Arc::new(Gaussian::from_precision_cholesky(mean.clone(), precision_cholesky.clone())?),
        ModelSpec::Rosenbrock { a, b, var1, var2 } => Arc::new(Rosenbrock::new(*a, *b, *var1, *var2)?),
        ModelSpec::Mog {
            weights,
            means,
            variances,
        } => Arc::new(MixtureOfGaussians::new(weights.clone(), means.clone(), variances.clone())?),
        ModelSpec::Blr { data, prior_precision } => Arc::new(BayesLogReg::new(data.clone(), *prior_precision)?),
    })
}

/// `n` exact draws from `model`, or a configuration error if it has no exact sampler.
pub fn exact_samples(model: &dyn TargetModel, n: usize, seed: u64) -> Result<StateSequence> {
    let d = model.dim();
    let mut out = StateSequence::zeros(n, d)?;
    for i in 0..n {
        if !model.exact_sample(seed, i, out.step_mut(i)) {
            return Err(Error::Config("target has no exact sampler".into()));
        }
    }
    Ok(out)
}

pub(crate) fn ref_normal(seed: u64, i: usize, k: usize) -> f64 {
    noise_value(seed, i, "reference", k, Distribution::StandardNormal)
}

pub(crate) fn ref_uniform(seed: u64, i: usize, k: usize) -> f64 {
    noise_value(seed, i, "reference", k, Distribution::Uniform)
}

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}
