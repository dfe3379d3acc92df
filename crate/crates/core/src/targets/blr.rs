use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ref_normal, ref_uniform, TargetModel};
use crate::error::{Error, Result};

/// Rows at or above this count are reduced by the worker pool.
const PARALLEL_ROWS: usize = 50_000;
const ROW_CHUNK: usize = 4096;

/// Design matrix `x` (row-major `n x d`) with binary labels `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || x.len() % d != 0 {
            return Err(Error::Config(format!("{} values do not form rows of width {d}", x.len())));
        }
        let n = x.len() / d;
        if n != y.len() {
            return Err(Error::Config(format!("design matrix has {n} rows but {} labels", y.len())));
        }
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(Self { x, y, n, d })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Center each column and scale it to unit population variance.
    /// Constant columns are left untouched so intercepts survive.
    pub fn standardize(&mut self) {
        let (n, d) = (self.n, self.d);
        for j in 0..d {
            let mean = (0..n).map(|i| self.x[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (self.x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                let sd = var.sqrt();
                for i in 0..n {
                    self.x[i * d + j] = (self.x[i * d + j] - mean) / sd;
                }
            }
        }
    }

    /// Write as headerless CSV with the label in the last column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Io(e.to_string()))?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{}", self.y[i] as u8));
            w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse an `N x (D+1)` CSV whose last column is a 0/1 label. A first row
/// with no numeric cells is treated as a header.
pub fn load_design_matrix(path: &Path, standardize: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(idx + 1, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && rec.iter().all(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                line,
                detail: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        if w < 2 {
            return Err(Error::Parse {
                line,
                detail: "need at least one feature and a label".into(),
            });
        }
        for (k, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                detail: format!("field {} is not numeric: {cell:?}", k + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("field {} is not finite", k + 1),
                });
            }
            if k + 1 == w {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Parse {
                        line,
                        detail: format!("label must be 0 or 1, found {cell:?}"),
                    });
                }
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let d = width.ok_or_else(|| Error::Parse {
        line: 1,
        detail: "no data rows".into(),
    })? - 1;
    let mut data = Dataset::new(x, y, d)?;
    if standardize {
        data.standardize();
    }
    Ok(data)
}

/// Logistic-regression data with standard-normal features and a
/// standard-normal true coefficient vector, returned alongside the data.
pub fn synthetic_credit(seed: u64, n: usize, d: usize) -> Result<(Dataset, Vec<f64>)> {
    let beta: Vec<f64> = (0..d).map(|k| ref_normal(seed, 0, k)).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|k| ref_normal(seed, i + 1, k)).collect();
        let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let u = ref_uniform(seed, i + 1, d);
        y.push(if u < sigmoid(eta) { 1.0 } else { 0.0 });
        x.extend(row);
    }
    Ok((Dataset::new(x, y, d)?, beta))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Bayesian logistic regression with an isotropic Gaussian prior.
#[derive(Debug, Clone)]
pub struct BayesLogReg {
    data: Dataset,
    prior_precision: f64,
}

struct Partial {
    logp: f64,
    grad: Vec<f64>,
    hv: Vec<f64>,
}

impl BayesLogReg {
    pub fn new(data: Dataset, prior_precision: f64) -> Result<Self> {
        if !(prior_precision > 0.0 && prior_precision.is_finite()) {
            return Err(Error::Config(format!("prior precision must be positive, got {prior_precision}")));
        }
        Ok(Self { data, prior_precision })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Likelihood terms over rows `lo..hi`; `v` requests an HVP.
    fn rows(&self, lo: usize, hi: usize, beta: &[f64], v: Option<&[f64]>, want_grad: bool) -> Partial {
        let d = self.data.d;
        let mut p = Partial {
            logp: 0.0,
            grad: vec![0.0; if want_grad { d } else { 0 }],
            hv: vec![0.0; if v.is_some() { d } else { 0 }],
        };
        for i in lo..hi {
            let row = self.data.row(i);
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let yi = self.data.y[i];
            p.logp += yi * eta - softplus(eta);
            let s = sigmoid(eta);
            if want_grad {
                let c = yi - s;
                p.grad.iter_mut().zip(row).for_each(|(g, r)| *g += c * r);
            }
            if let Some(v) = v {
                let xv: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                let c = -s * (1.0 - s) * xv;
                p.hv.iter_mut().zip(row).for_each(|(h, r)| *h += c * r);
            }
        }
        p
    }

    fn reduce(&self, beta: &[f64], v: Option<&[f64]>, want_grad: bool) -> Partial {
        let n = self.data.n;
        if n < PARALLEL_ROWS {
            return self.rows(0, n, beta, v, want_grad);
        }
        // Fixed chunks summed in index order keep results independent of the pool.
        let parts: Vec<Partial> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|c| self.rows(c * ROW_CHUNK, ((c + 1) * ROW_CHUNK).min(n), beta, v, want_grad))
            .collect();
        let mut it = parts.into_iter();
        let mut acc = it.next().unwrap();
        for p in it {
            acc.logp += p.logp;
            acc.grad.iter_mut().zip(&p.grad).for_each(|(a, b)| *a += b);
            acc.hv.iter_mut().zip(&p.hv).for_each(|(a, b)| *a += b);
        }
        acc
    }

    fn prior_logp(&self, beta: &[f64]) -> f64 {
        -0.5 * self.prior_precision * beta.iter().map(|b| b * b).sum::<f64>()
    }
}

impl TargetModel for BayesLogReg {
    fn dim(&self) -> usize {
        self.data.d
    }

    fn logp(&self, beta: &[f64]) -> f64 {
        self.reduce(beta, None, false).logp + self.prior_logp(beta)
    }

    fn grad(&self, beta: &[f64], out: &mut [f64]) {
        self.logp_grad(beta, out);
    }

    fn logp_grad(&self, beta: &[f64], out: &mut [f64]) -> f64 {
        let p = self.reduce(beta, None, true);
        for ((o, g), b) in out.iter_mut().zip(&p.grad).zip(beta) {
            *o = g - self.prior_precision * b;
        }
        p.logp + self.prior_logp(beta)
    }

    fn hvp(&self, beta: &[f64], v: &[f64], out: &mut [f64]) {
        let p = self.reduce(beta, Some(v), false);
        for ((o, h), w) in out.iter_mut().zip(&p.hv).zip(v) {
            *o = h - self.prior_precision * w;
        }
    }

    fn logp_grad_hvp(&self, beta: &[f64], v: &[f64], grad: &mut [f64], hv: &mut [f64]) -> f64 {
        let p = self.reduce(beta, Some(v), true);
        for ((o, g), b) in grad.iter_mut().zip(&p.grad).zip(beta) {
            *o = g - self.prior_precision * b;
        }
        for ((o, h), w) in hv.iter_mut().zip(&p.hv).zip(v) {
            *o = h - self.prior_precision * w;
        }
        p.logp + self.prior_logp(beta)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fd;
    use super::*;
    use std::io::Write;

    fn toy() -> BayesLogReg {
        let data = Dataset::new(vec![1.0, 0.5, -0.3, 2.0, 0.8, -1.2], vec![1.0, 0.0, 1.0], 2).unwrap();
        BayesLogReg::new(data, 0.7).unwrap()
    }

    #[test]
    fn toy_hvp_matches_finite_differences() {
        let m = toy();
        let beta = [0.4, -0.9];
        for v in [[1.0, 0.0], [0.0, 1.0], [0.3, -2.0]] {
            let mut hv = [0.0; 2];
            m.hvp(&beta, &v, &mut hv);
            assert!(fd::rel_err(&hv, &fd::hvp(&m, &beta, &v, 1e-5)) < 1e-7);
        }
        let mut g = [0.0; 2];
        m.grad(&beta, &mut g);
        assert!(fd::rel_err(&g, &fd::grad(&m, &beta, 1e-5)) < 1e-7);
        let (mut g2, mut hv2) = ([0.0; 2], [0.0; 2]);
        let lp = m.logp_grad_hvp(&beta, &[0.3, -2.0], &mut g2, &mut hv2);
        assert_eq!(lp, m.logp(&beta));
        assert_eq!(g2, g);
    }

    #[test]
    fn logp_closed_form() {
        let m = toy();
        let beta = [0.4, -0.9];
        let mut want = -0.5 * 0.7 * (0.16 + 0.81);
        for i in 0..3 {
            let r = m.data.row(i);
            let eta = r[0] * beta[0] + r[1] * beta[1];
            want += m.data.y[i] * eta - (1.0 + eta.exp()).ln();
        }
        assert!((m.logp(&beta) - want).abs() < 1e-12);
    }

    #[test]
    fn two_row_csv() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1,0\n-1,1").unwrap();
        let raw = load_design_matrix(f.path(), false).unwrap();
        assert_eq!(raw.x, vec![1.0, -1.0]);
        assert_eq!(raw.y, vec![0.0, 1.0]);
        // Population standard deviation of {1, -1} is 1.
        let std = load_design_matrix(f.path(), true).unwrap();
        assert_eq!(std.x, vec![1.0, -1.0]);
    }

    #[test]
    fn standardization_scales_columns() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,label\n1,10,0\n3,10,1\n5,10,1").unwrap();
        let d = load_design_matrix(f.path(), true).unwrap();
        let c0: Vec<f64> = (0..3).map(|i| d.row(i)[0]).collect();
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((c0[0] + 2.0 / sd).abs() < 1e-12 && c0[1].abs() < 1e-12);
        assert_eq!(d.row(0)[1], 10.0);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let cases = [
            ("1,2,0\n3,1\n", 2),
            ("1,2,0\n3,x,1\n", 2),
            ("1,2,0\n3,4,1\n5,6,2\n", 3),
        ];
        for (body, line) in cases {
            let mut f = tempfile::NamedTempFile::new().unwrap();
            write!(f, "{body}").unwrap();
            match load_design_matrix(f.path(), false) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body:?}"),
                other => panic!("{body:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let (data, _) = synthetic_credit(5, 20, 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        data.write_csv(f.path()).unwrap();
        assert_eq!(load_design_matrix(f.path(), false).unwrap(), data);
    }

    #[test]
    fn parallel_reduction_matches_serial() {
        let (data, beta) = synthetic_credit(8, PARALLEL_ROWS + 123, 3).unwrap();
        let m = BayesLogReg::new(data, 1.0).unwrap();
        let n = m.data.n;
        let serial = m.rows(0, n, &beta, Some(&[1.0, 0.0, -1.0]), true);
        let par = m.reduce(&beta, Some(&[1.0, 0.0, -1.0]), true);
        assert!((serial.logp - par.logp).abs() < 1e-9 * serial.logp.abs());
        assert!(fd::rel_err(&par.grad, &serial.grad) < 1e-12);
        assert!(fd::rel_err(&par.hv, &serial.hv) < 1e-12);
    }

    #[test]
    fn synthetic_map_recovers_signs() {
        let (data, beta_star) = synthetic_credit(2024, 1000, 25).unwrap();
        let m = BayesLogReg::new(data, 1.0).unwrap();
        // Newton ascent on the concave log posterior, Hessian built from HVPs.
        let d = 25;
        let mut beta = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut col = vec![0.0; d];
        for _ in 0..50 {
            m.grad(&beta, &mut g);
            let mut e = vec![0.0; d];
            for j in 0..d {
                e[j] = 1.0;
                m.hvp(&beta, &e, &mut col);
                e[j] = 0.0;
                for i in 0..d {
                    h[i * d + j] = -col[i];
                }
            }
            let l = crate::linalg::cholesky(&h, d).unwrap();
            crate::linalg::solve_lower(&l, d, &mut g);
            crate::linalg::solve_lower_transpose(&l, d, &mut g);
            beta.iter_mut().zip(&g).for_each(|(b, s)| *b += s);
        }
        m.grad(&beta, &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        let agree = beta.iter().zip(&beta_star).filter(|(a, b)| a.signum() == b.signum()).count();
        assert!(agree as f64 >= 0.9 * d as f64, "{agree}/{d}");
    }
}
