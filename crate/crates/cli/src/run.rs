//! `run`: build the sampler, solve B chains, write the trace and the report.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parmcmc_core::samplers::{accept_decisions, hmc_step, EightSchoolsData, GibbsHyper};
use parmcmc_core::targets::{
    load_design_matrix, orthogonal_basis, synthetic_credit, transform_system, OrthogonalBasis,
};
use parmcmc_core::{
    acceptance_rate, run_deer, sequential_evaluate, DeerConfig, GatedKernel, GibbsKernel, HmcKernel, InitialState,
    LeapfrogMode, MalaKernel, ModelSpec, StateSequence, TargetModel,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Preconditioner, RunConfig, SamplerKind};
use crate::error::{CliError, CliResult};
use crate::trace::{TraceFile, TraceHeader, SCHEMA_VERSION};

/// Seed of the synthetic logistic-regression data set.
pub const BLR_DATA_SEED: u64 = 0x00C0_FFEE;
const INIT_SALT: u64 = 0x1A17_5EED_0000_0001;
const PILOT_SALT: u64 = 0x9110_7000_0000_0002;
const PROBE_SALT: u64 = 0x9B0B_E000_0000_0003;
/// Longest pilot chain used to pick an automatic preconditioner.
pub const PILOT_STEPS: usize = 5000;

pub enum Target {
    Model(ModelSpec, Arc<dyn TargetModel>),
    EightSchools(EightSchoolsData),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Model(_, m) => m.dim(),
            Target::EightSchools(d) => 2 + 2 * d.schools(),
        }
    }

    pub fn model(&self) -> Option<&Arc<dyn TargetModel>> {
        match self {
            Target::Model(_, m) => Some(m),
            Target::EightSchools(_) => None,
        }
    }
}

pub fn build_target(cfg: &RunConfig) -> CliResult<Target> {
    let spec = match cfg.target.as_str() {
        "eight-schools" => return Ok(Target::EightSchools(EightSchoolsData::standard())),
        "std-normal" => ModelSpec::StdNormal { dim: cfg.dim },
        "rosenbrock" => {
            let [a, b, var1, var2] = cfg.rosenbrock;
            ModelSpec::Rosenbrock { a, b, var1, var2 }
        }
        "mog" => ModelSpec::mog_default(),
        "blr-synthetic" => ModelSpec::Blr {
            data: synthetic_credit(BLR_DATA_SEED, cfg.rows, cfg.dim)?.0,
            prior_precision: cfg.prior_precision,
        },
        path => ModelSpec::Blr {
            data: load_design_matrix(Path::new(path), cfg.standardize)?,
            prior_precision: cfg.prior_precision,
        },
    };
    let model = spec.build()?;
    Ok(Target::Model(spec, model))
}

pub enum Sampler {
    Mala(MalaKernel),
    Hmc(HmcKernel),
    Gibbs(GibbsKernel),
}

impl Sampler {
    pub fn kernel(&self) -> &dyn GatedKernel {
        match self {
            Sampler::Mala(k) => k,
            Sampler::Hmc(k) => k,
            Sampler::Gibbs(k) => k,
        }
    }
}

/// Kernel of `cfg.sampler` with noise stream `seed` covering `steps` transitions.
pub fn build_sampler(cfg: &RunConfig, target: &Target, seed: u64, steps: usize) -> CliResult<Sampler> {
    Ok(match (cfg.sampler, target) {
        (SamplerKind::Gibbs, Target::EightSchools(data)) => {
            Sampler::Gibbs(GibbsKernel::new(data.clone(), GibbsHyper::default(), seed, steps)?)
        }
        (SamplerKind::Mala, Target::Model(_, m)) => Sampler::Mala(MalaKernel::new(m.clone(), cfg.eps, seed, steps)?),
        (SamplerKind::Hmc | SamplerKind::HmcParallelLeapfrog, Target::Model(_, m)) => Sampler::Hmc(HmcKernel::new(
            m.clone(),
            cfg.eps,
            cfg.leapfrog_steps,
            cfg.mass.clone(),
            seed,
            steps,
        )?),
        _ => return Err(CliError::Usage(format!("sampler: {} cannot run on {}", cfg.sampler, cfg.target))),
    })
}

/// Exact draw when the target has one (otherwise the origin, or the data-driven
/// Gibbs start), followed by `burn_in` sequential steps on a separate stream.
pub fn initial_state(cfg: &RunConfig, target: &Target, chain_seed: u64) -> CliResult<InitialState> {
    let seed = chain_seed ^ INIT_SALT;
    let start = match target {
        Target::EightSchools(data) => GibbsKernel::new(data.clone(), GibbsHyper::default(), seed, 1)?
            .initial_state()
            .into_vec(),
        Target::Model(_, m) => {
            let mut x = vec![0.0; m.dim()];
            if !m.exact_sample(seed, 0, &mut x) {
                x.fill(0.0);
            }
            x
        }
    };
    let start = InitialState::new(start)?;
    if cfg.burn_in == 0 {
        return Ok(start);
    }
    let k = build_sampler(cfg, target, seed, cfg.burn_in)?;
    let burn = sequential_evaluate(k.kernel(), &start)?;
    Ok(InitialState::new(burn.step(burn.len() - 1).to_vec())?)
}

/// Symmetrized `-∇² log p(s0)`, assembled from HVP columns.
pub fn neg_hessian(model: &dyn TargetModel, s0: &[f64]) -> Vec<f64> {
    let d = model.dim();
    let mut h = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        model.hvp(s0, &e, &mut col);
        e[j] = 0.0;
        for i in 0..d {
            h[i * d + j] = -col[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = m;
            h[j * d + i] = m;
        }
    }
    h
}

/// Per-coordinate standard deviations, with degenerate coordinates set to 1.
pub fn column_std(seq: &StateSequence) -> Vec<f64> {
    (0..seq.dim())
        .map(|d| {
            let c = seq.column(d);
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            let s = var.sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect()
}

/// Everything a chain needs before the timed solve.
pub struct PreparedChain {
    pub chain: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub s0: InitialState,
    pub basis: Option<OrthogonalBasis>,
    pub deer: Option<DeerConfig>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LeapfrogStats {
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub fallbacks: usize,
}

/// Result of one solve of one chain.
#[derive(Debug, Clone)]
pub struct ChainSolve {
    pub trace: StateSequence,
    pub iterations: usize,
    pub delta_history: Vec<f64>,
    pub converged: bool,
    pub full_trace: Option<Vec<StateSequence>>,
    pub leapfrog: Option<LeapfrogStats>,
    pub accepted: Option<Vec<bool>>,
}

fn deer_config(cfg: &RunConfig, seed: u64) -> Option<DeerConfig> {
    let mode = cfg.method.mode()?;
    let steps = if cfg.sampler == SamplerKind::HmcParallelLeapfrog {
        cfg.leapfrog_steps
    } else {
        cfg.t
    };
    let mut d = DeerConfig::new(mode, steps);
    d.atol = cfg.atol;
    d.rtol = cfg.rtol;
    if let Some(m) = cfg.max_iters {
        d.max_iters = m;
    }
    d.hutchinson_samples = cfg.hutchinson_samples;
    d.damping = cfg.damping;
    d.clip = cfg.clip;
    d.window_len = cfg.window;
    d.full_trace = cfg.full_trace;
    d.probe_seed = seed ^ PROBE_SALT;
    if let Preconditioner::Values(p) = &cfg.preconditioner {
        d.preconditioner = Some(p.clone());
    }
    Some(d)
}

pub fn prepare_chain(cfg: &RunConfig, target: &Target, chain: usize) -> CliResult<PreparedChain> {
    let seed = cfg.chain_seed(chain);
    let sampler = build_sampler(cfg, target, seed, cfg.t)?;
    let s0 = initial_state(cfg, target, seed)?;
    let mut deer = deer_config(cfg, seed);
    let whole_chain = cfg.sampler != SamplerKind::HmcParallelLeapfrog;

    let basis = match (cfg.orthogonal && deer.is_some(), target.model()) {
        (true, Some(m)) => Some(orthogonal_basis(&neg_hessian(m.as_ref(), s0.as_slice()), m.dim())?),
        _ => None,
    };
    if let (Some(d), Preconditioner::Auto, true) = (deer.as_mut(), &cfg.preconditioner, whole_chain) {
        let pilot_len = cfg.t.min(PILOT_STEPS).max(2);
        let pilot = build_sampler(cfg, target, seed ^ PILOT_SALT, pilot_len)?;
        let mut tr = sequential_evaluate(pilot.kernel(), &s0)?;
        if let Some(b) = &basis {
            tr = b.sequence_to_basis(&tr)?;
        }
        d.preconditioner = Some(column_std(&tr));
    }
    if let Some(d) = &deer {
        d.validate()?;
    }
    Ok(PreparedChain {
        chain,
        seed,
        sampler,
        s0,
        basis,
        deer,
    })
}

fn chain_error(chain: usize, e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Diverged(m) => CliError::Diverged(format!("chain {chain}: {m}")),
        other => other,
    }
}

/// Solve one prepared chain with the configured method.
pub fn solve_chain(cfg: &RunConfig, p: &PreparedChain) -> CliResult<ChainSolve> {
    let kernel = p.sampler.kernel();
    if cfg.sampler == SamplerKind::HmcParallelLeapfrog {
        return solve_leapfrog(cfg, p).map_err(|e| chain_error(p.chain, e));
    }
    let Some(dc) = &p.deer else {
        let trace = sequential_evaluate(kernel, &p.s0).map_err(|e| chain_error(p.chain, e))?;
        return Ok(ChainSolve {
            trace,
            iterations: cfg.t,
            delta_history: Vec::new(),
            converged: true,
            full_trace: None,
            leapfrog: None,
            accepted: None,
        });
    };
    let res = match &p.basis {
        None => run_deer(kernel, &p.s0, dc),
        Some(b) => {
            let sys = transform_system(kernel, b.clone())?;
            let z0 = b.initial_to_basis(&p.s0)?;
            run_deer(&sys, &z0, dc).and_then(|mut r| {
                r.trace = b.sequence_to_original(&r.trace)?;
                if let Some(ft) = r.full_trace.as_mut() {
                    for s in ft.iter_mut() {
                        *s = b.sequence_to_original(s)?;
                    }
                }
                Ok(r)
            })
        }
    }
    .map_err(|e| chain_error(p.chain, e))?;
    Ok(ChainSolve {
        trace: res.trace,
        iterations: res.iterations,
        delta_history: res.delta_history,
        converged: res.converged,
        full_trace: res.full_trace,
        leapfrog: None,
        accepted: None,
    })
}

/// Sequential HMC chain whose leapfrog trajectories use the configured solver.
fn solve_leapfrog(cfg: &RunConfig, p: &PreparedChain) -> CliResult<ChainSolve> {
    let Sampler::Hmc(k) = &p.sampler else {
        return Err(CliError::Usage("sampler: hmc-parallel-leapfrog needs an hmc kernel".into()));
    };
    let mode = match &p.deer {
        Some(d) => LeapfrogMode::Parallel(d.clone()),
        None => LeapfrogMode::Sequential,
    };
    let d = k.model().dim();
    let mut trace = StateSequence::zeros(cfg.t, d)?;
    let mut x = p.s0.as_slice().to_vec();
    let mut stats = LeapfrogStats::default();
    let mut accepted = Vec::with_capacity(cfg.t);
    let mut total = 0usize;
    for t in 0..cfg.t {
        let out = hmc_step(&x, t, k, &mode)?;
        total += out.leapfrog_iterations;
        stats.max_iterations = stats.max_iterations.max(out.leapfrog_iterations);
        stats.fallbacks += out.fallback as usize;
        accepted.push(out.accepted);
        trace.step_mut(t).copy_from_slice(&out.state);
        x = out.state;
    }
    stats.mean_iterations = total as f64 / cfg.t as f64;
    Ok(ChainSolve {
        trace,
        iterations: stats.max_iterations,
        delta_history: Vec::new(),
        converged: stats.fallbacks == 0,
        full_trace: None,
        leapfrog: Some(stats),
        accepted: Some(accepted),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainReport {
    pub chain: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub delta_history: Vec<f64>,
    pub acceptance_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leapfrog: Option<LeapfrogStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub sampler: String,
    pub method: String,
    pub target: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub seed: u64,
    pub warmups: usize,
    /// Wall-clock seconds of each timed repetition over all chains.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub chains: Vec<ChainReport>,
    pub config: std::collections::BTreeMap<String, String>,
    pub config_text: String,
}

pub struct RunOutput {
    pub report: RunReport,
    pub trace: TraceFile,
    pub chains: Vec<PreparedChain>,
    pub solves: Vec<ChainSolve>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Run all chains without writing anything.
pub fn execute(cfg: &RunConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let target = build_target(cfg)?;
    let chains = (0..cfg.b)
        .into_par_iter()
        .map(|b| prepare_chain(cfg, &target, b))
        .collect::<CliResult<Vec<_>>>()?;

    let mut seconds = Vec::with_capacity(cfg.reps);
    let mut solves = Vec::new();
    for rep in 0..cfg.warmups + cfg.reps {
        let start = Instant::now();
        solves = chains
            .par_iter()
            .map(|p| solve_chain(cfg, p))
            .collect::<CliResult<Vec<_>>>()?;
        if rep >= cfg.warmups {
            seconds.push(start.elapsed().as_secs_f64());
        }
    }

    let mut reports = Vec::with_capacity(cfg.b);
    for (p, s) in chains.iter().zip(solves.iter_mut()) {
        if s.accepted.is_none() {
            s.accepted = Some(accept_decisions(p.sampler.kernel(), &p.s0, &s.trace));
        }
        reports.push(ChainReport {
            chain: p.chain,
            seed: p.seed,
            iterations: s.iterations,
            converged: s.converged,
            delta_history: s.delta_history.clone(),
            acceptance_rate: acceptance_rate(s.accepted.as_deref().unwrap_or(&[])).unwrap_or(f64::NAN),
            leapfrog: s.leapfrog.clone(),
        });
    }

    let d = target.dim();
    let pairs = cfg.pairs();
    let header = TraceHeader::new(cfg.t, cfg.b, d, &cfg.sampler.to_string(), cfg.seed, pairs.clone());
    let trace = TraceFile::new(header, solves.iter().map(|s| s.trace.clone()).collect())?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        sampler: cfg.sampler.to_string(),
        method: cfg.method.to_string(),
        target: cfg.target.clone(),
        t: cfg.t,
        b: cfg.b,
        d,
        seed: cfg.seed,
        warmups: cfg.warmups,
        median_seconds: median(&seconds),
        mean_seconds: seconds.iter().sum::<f64>() / seconds.len() as f64,
        seconds,
        chains: reports,
        config: pairs,
        config_text: cfg.to_text(),
    };
    Ok(RunOutput {
        report,
        trace,
        chains,
        solves,
    })
}

/// `trace.bin` -> `trace.report.json`.
pub fn report_path(payload: &Path) -> PathBuf {
    payload.with_extension("report.json")
}

/// `trace.bin` -> `trace.iter3.bin`.
pub fn iterate_path(payload: &Path, i: usize) -> PathBuf {
    payload.with_extension(format!("iter{i}.bin"))
}

/// Run and write the trace, its sidecar, the report and optional extras to `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> CliResult<RunOutput> {
    let out = execute(cfg)?;
    if let Some(path) = &cfg.out {
        out.trace.write(path)?;
        std::fs::write(report_path(path), serde_json::to_string_pretty(&out.report)? + "\n")?;
        if cfg.csv {
            out.trace.write_csv(&path.with_extension("csv"))?;
        }
        write_full_traces(&out, path)?;
    }
    Ok(out)
}

/// One file per solver iteration; chains that converged earlier repeat their last iterate.
fn write_full_traces(out: &RunOutput, path: &Path) -> CliResult<()> {
    let iterates: Vec<&Vec<StateSequence>> = out.solves.iter().filter_map(|s| s.full_trace.as_ref()).collect();
    if iterates.len() != out.solves.len() {
        return Ok(());
    }
    let n = iterates.iter().map(|v| v.len()).max().unwrap_or(0);
    for i in 0..n {
        let chains = iterates
            .iter()
            .map(|v| v.get(i).or(v.last()).cloned())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CliError::Usage("full_trace: empty iterate list".into()))?;
        let mut header = out.trace.header.clone();
        header.config.insert("iterate".into(), i.to_string());
        TraceFile::new(header, chains)?.write(&iterate_path(path, i))?;
    }
    Ok(())
}
