//! Batch front-end for parallel-in-time MCMC: run chains, sweep timings,
//! compute sample-quality metrics and compare traces.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod trace;

pub use commands::{cmd_bench, cmd_diff, cmd_metrics, BenchGrid, BenchRow, DiffReport, Metric, MetricsReport, MmdOptions};
pub use config::{Method, Preconditioner, RunConfig, SamplerKind};
pub use error::{CliError, CliResult};
pub use run::{cmd_run, execute, RunOutput, RunReport};
pub use trace::{TraceFile, TraceHeader};

/// Environment variable overriding the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "PARMCMC_THREADS";

/// Worker count: explicit flag, then the environment, then hardware parallelism.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}: expected a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Run `f` inside a worker pool of `threads` workers.
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("threads: {e}")))?;
    Ok(pool.install(f))
}
