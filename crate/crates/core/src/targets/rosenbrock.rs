use super::{ref_normal, TargetModel};
use crate::error::{Error, Result};

/// `log p(x) = -(x₁ - a)²/(2 var1) - (x₂ - b x₁²)²/(2 var2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rosenbrock {
    pub a: f64,
    pub b: f64,
    pub var1: f64,
    pub var2: f64,
}

impl Rosenbrock {
    pub fn new(a: f64, b: f64, var1: f64, var2: f64) -> Result<Self> {
        if !(var1 > 0.0 && var2 > 0.0) {
            return Err(Error::Config(format!(
                "rosenbrock variances must be positive, got {var1} and {var2}"
            )));
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Config("rosenbrock parameters must be finite".into()));
        }
        Ok(Self { a, b, var1, var2 })
    }
}

impl TargetModel for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }

    fn logp(&self, x: &[f64]) -> f64 {
        let r = x[1] - self.b * x[0] * x[0];
        -(x[0] - self.a).powi(2) / (2.0 * self.var1) - r * r / (2.0 * self.var2)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let r = x[1] - self.b * x[0] * x[0];
        out[0] = -(x[0] - self.a) / self.var1 + 2.0 * self.b * x[0] * r / self.var2;
        out[1] = -r / self.var2;
    }

    fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let r = x[1] - self.b * x[0] * x[0];
        let h11 = -1.0 / self.var1 + 2.0 * self.b * (r - 2.0 * self.b * x[0] * x[0]) / self.var2;
        let h12 = 2.0 * self.b * x[0] / self.var2;
        let h22 = -1.0 / self.var2;
        out[0] = h11 * v[0] + h12 * v[1];
        out[1] = h12 * v[0] + h22 * v[1];
    }

    fn exact_sample(&self, seed: u64, i: usize, out: &mut [f64]) -> bool {
        out[0] = self.a + self.var1.sqrt() * ref_normal(seed, i, 0);
        out[1] = self.b * out[0] * out[0] + self.var2.sqrt() * ref_normal(seed, i, 1);
        true
    }
}
