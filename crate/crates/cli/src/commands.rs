//! `bench`, `metrics` and `diff`.

use std::io::Write;
use std::str::FromStr;

use parmcmc_core::deer::converged;
use parmcmc_core::{ess, median_heuristic, mmd_subsampled, EssReport, MmdEstimate, SampleSet, StateSequence};
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{execute, median};
use crate::trace::TraceFile;

/// Cells of a timing sweep; every other setting comes from the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub bs: Vec<usize>,
    pub ts: Vec<usize>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub sampler: String,
    pub method: String,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub median_seconds: f64,
    /// Median over chains.
    pub iterations: f64,
    pub converged_fraction: f64,
    pub status: String,
}

/// Run every cell; failing cells become rows with a non-`ok` status.
pub fn cmd_bench(base: &RunConfig, grid: &BenchGrid) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &method in &grid.methods {
        for &t in &grid.ts {
            for &b in &grid.bs {
                let mut cfg = base.clone();
                cfg.method = method;
                cfg.t = t;
                cfg.b = b;
                cfg.out = None;
                let mut row = BenchRow {
                    sampler: cfg.sampler.to_string(),
                    method: method.to_string(),
                    b,
                    t,
                    median_seconds: f64::NAN,
                    iterations: f64::NAN,
                    converged_fraction: f64::NAN,
                    status: "ok".into(),
                };
                match execute(&cfg) {
                    Ok(out) => {
                        let r = &out.report;
                        let iters: Vec<f64> = r.chains.iter().map(|c| c.iterations as f64).collect();
                        row.median_seconds = r.median_seconds;
                        row.iterations = median(&iters);
                        row.converged_fraction =
                            r.chains.iter().filter(|c| c.converged).count() as f64 / r.chains.len() as f64;
                        if row.converged_fraction < 1.0 {
                            row.status = "not-converged".into();
                        }
                    }
                    Err(e) => row.status = format!("error: {e}"),
                }
                rows.push(row);
            }
        }
    }
    rows
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mmd,
    Ess,
    Acceptance,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mmd" => Ok(Metric::Mmd),
            "ess" => Ok(Metric::Ess),
            "acceptance" => Ok(Metric::Acceptance),
            _ => Err(format!("unknown metric '{s}' (expected one of: mmd, ess, acceptance)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdOptions {
    /// `None` uses the median heuristic on the reference.
    pub sigma: Option<f64>,
    pub subsample: usize,
    pub reps: usize,
    pub seed: u64,
    /// Leading samples of every chain to drop.
    pub skip: usize,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self {
            sigma: None,
            subsample: 1000,
            reps: 20,
            seed: 0,
            skip: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "metric", rename_all = "lowercase")]
pub enum MetricsReport {
    Mmd {
        /// `trace-vs-reference` or `first-half-vs-second-half`.
        comparison: String,
        sigma_from_median_heuristic: bool,
        #[serde(flatten)]
        estimate: MmdEstimate,
    },
    Ess {
        chains: Vec<EssReport>,
    },
    Acceptance {
        /// Fraction of steps whose state differs from its predecessor, per chain.
        chains: Vec<f64>,
        mean: f64,
    },
}

fn pooled(tf: &TraceFile, skip: usize) -> CliResult<SampleSet> {
    let d = tf.header.d;
    let mut pts = Vec::new();
    for c in &tf.chains {
        pts.extend_from_slice(&c.as_slice()[skip.min(c.len()) * d..]);
    }
    let n = pts.len() / d.max(1);
    Ok(SampleSet::new(pts, n, d)?)
}

/// Fraction of steps `t ≥ 1` with `x_t ≠ x_{t-1}`; gated kernels repeat the state on rejection.
pub fn moved_fraction(c: &StateSequence) -> f64 {
    if c.len() < 2 {
        return f64::NAN;
    }
    let moved = (1..c.len()).filter(|&t| c.step(t) != c.step(t - 1)).count();
    moved as f64 / (c.len() - 1) as f64
}

/// MMD² against `reference` (or between the trace's halves), ESS, or acceptance.
pub fn cmd_metrics(
    trace: &TraceFile,
    reference: Option<&TraceFile>,
    which: Metric,
    opts: &MmdOptions,
) -> CliResult<MetricsReport> {
    Ok(match which {
        Metric::Mmd => {
            let all = pooled(trace, opts.skip)?;
            let (x, y, comparison) = match reference {
                Some(r) => {
                    if r.header.d != trace.header.d {
                        return Err(CliError::Core(parmcmc_core::Error::Contract(format!(
                            "trace has D={}, reference D={}",
                            trace.header.d, r.header.d
                        ))));
                    }
                    (all, pooled(r, 0)?, "trace-vs-reference")
                }
                None => {
                    let n = all.len() / 2;
                    let d = all.dim();
                    let (a, b) = all.as_slice().split_at(n * d);
                    (
                        SampleSet::new(a.to_vec(), n, d)?,
                        SampleSet::new(b[..n * d].to_vec(), n, d)?,
                        "first-half-vs-second-half",
                    )
                }
            };
            let sigma = match opts.sigma {
                Some(s) => s,
                None => median_heuristic(&y, opts.subsample.max(2), opts.reps, opts.seed)?,
            };
            MetricsReport::Mmd {
                comparison: comparison.into(),
                sigma_from_median_heuristic: opts.sigma.is_none(),
                estimate: mmd_subsampled(&x, &y, sigma, opts.subsample, opts.reps, opts.seed)?,
            }
        }
        Metric::Ess => MetricsReport::Ess {
            chains: trace.chains.iter().map(ess).collect::<Result<_, _>>()?,
        },
        Metric::Acceptance => {
            let chains: Vec<f64> = trace.chains.iter().map(moved_fraction).collect();
            let mean = chains.iter().sum::<f64>() / chains.len() as f64;
            MetricsReport::Acceptance { chains, mean }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub pass: bool,
    pub atol: f64,
    pub rtol: f64,
    pub max_abs: f64,
    /// First `(chain, step)` failing `|a - b| ≤ atol + rtol |b|`.
    pub first_failure: Option<(usize, usize)>,
    pub failing_steps: usize,
}

/// Elementwise tolerance test of `a` against reference `b`.
pub fn cmd_diff(a: &TraceFile, b: &TraceFile, atol: f64, rtol: f64) -> CliResult<DiffReport> {
    let (ha, hb) = (&a.header, &b.header);
    if (ha.b, ha.t, ha.d) != (hb.b, hb.t, hb.d) {
        return Err(CliError::Core(parmcmc_core::Error::Structure(format!(
            "shapes differ: {}x{}x{} vs {}x{}x{}",
            ha.b, ha.t, ha.d, hb.b, hb.t, hb.d
        ))));
    }
    let mut report = DiffReport {
        pass: true,
        atol,
        rtol,
        max_abs: 0.0,
        first_failure: None,
        failing_steps: 0,
    };
    for (chain, (ca, cb)) in a.chains.iter().zip(&b.chains).enumerate() {
        let (ok, dmax) = converged(ca, cb, atol, rtol)?;
        report.max_abs = if dmax.is_nan() { f64::NAN } else { report.max_abs.max(dmax) };
        if ok {
            continue;
        }
        report.pass = false;
        for t in 0..ca.len() {
            let bad = ca
                .step(t)
                .iter()
                .zip(cb.step(t))
                .any(|(x, y)| !((x - y).abs() <= atol + rtol * y.abs()));
            if bad {
                report.failing_steps += 1;
                report.first_failure.get_or_insert((chain, t));
            }
        }
    }
    Ok(report)
}
