use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use parmcmc_cli::commands::write_bench_csv;
use parmcmc_cli::{
    cmd_bench, cmd_diff, cmd_metrics, cmd_run, resolve_threads, with_pool, BenchGrid, CliError, CliResult, Method,
    Metric, MmdOptions, RunConfig, TraceFile,
};

#[derive(Parser)]
#[command(name = "parmcmc", version, about = "Parallel-in-time MCMC chains")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run B chains and write the trace, its JSON sidecar and a run report.
    Run(RunArgs),
    /// Time a grid of (B, T, method) cells and emit CSV.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated chain counts.
        #[arg(long, default_value = "1")]
        bs: String,
        /// Comma-separated chain lengths.
        #[arg(long, default_value = "1000")]
        ts: String,
        /// Comma-separated methods.
        #[arg(long, default_value = "sequential,quasi-deer")]
        methods: String,
    },
    /// MMD², ESS or acceptance of a trace, as JSON.
    Metrics {
        trace: PathBuf,
        /// Reference trace for MMD; without one the trace's halves are compared.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "mmd")]
        which: Metric,
        /// RBF bandwidth; defaults to the median heuristic on the reference.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        subsample: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leading samples per chain to drop from the trace.
        #[arg(long, default_value_t = 0)]
        skip: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Elementwise tolerance test of trace A against reference B.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        atol: f64,
        #[arg(long, default_value_t = 1e-3)]
        rtol: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long = "B")]
    b: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    leapfrog_steps: Option<String>,
    #[arg(long)]
    mass: Option<String>,
    #[arg(long)]
    atol: Option<String>,
    #[arg(long)]
    rtol: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    hutchinson_samples: Option<String>,
    #[arg(long)]
    damping: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    full_trace: bool,
    #[arg(long)]
    orthogonal: bool,
    #[arg(long)]
    preconditioner: Option<String>,
    #[arg(long)]
    burn_in: Option<String>,
    #[arg(long)]
    warmups: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Also write the trace as CSV.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    rows: Option<String>,
}

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        let flags = [
            ("sampler", &self.sampler),
            ("target", &self.target),
            ("method", &self.method),
            ("T", &self.t),
            ("B", &self.b),
            ("seed", &self.seed),
            ("eps", &self.eps),
            ("leapfrog_steps", &self.leapfrog_steps),
            ("mass", &self.mass),
            ("atol", &self.atol),
            ("rtol", &self.rtol),
            ("max_iters", &self.max_iters),
            ("hutchinson_samples", &self.hutchinson_samples),
            ("damping", &self.damping),
            ("clip", &self.clip),
            ("window", &self.window),
            ("preconditioner", &self.preconditioner),
            ("burn_in", &self.burn_in),
            ("warmups", &self.warmups),
            ("reps", &self.reps),
            ("threads", &self.threads),
            ("out", &self.out),
            ("dim", &self.dim),
            ("rows", &self.rows),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, v)?;
            }
        }
        if self.full_trace {
            c.full_trace = true;
        }
        if self.orthogonal {
            c.orthogonal = true;
        }
        if self.csv {
            c.csv = true;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set: expected KEY=VALUE, got '{kv}'")))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn list<T: std::str::FromStr>(key: &str, s: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| v.trim().parse().map_err(|e| CliError::Usage(format!("{key}: {e} (got '{v}')"))))
        .collect()
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Command::Run(args) => {
            let cfg = args.config()?;
            let out = with_pool(resolve_threads(cfg.threads)?, || cmd_run(&cfg))??;
            print_json(&out.report)
        }
        Command::Bench { run, bs, ts, methods } => {
            let cfg = run.config()?;
            let grid = BenchGrid {
                bs: list("bs", &bs)?,
                ts: list("ts", &ts)?,
                methods: list::<Method>("methods", &methods)?,
            };
            let rows = with_pool(resolve_threads(cfg.threads)?, || cmd_bench(&cfg, &grid))?;
            match &cfg.out {
                Some(p) => write_bench_csv(&rows, std::fs::File::create(p)?),
                None => write_bench_csv(&rows, std::io::stdout().lock()),
            }
        }
        Command::Metrics {
            trace,
            reference,
            which,
            sigma,
            subsample,
            reps,
            seed,
            skip,
            threads,
        } => {
            let tf = TraceFile::read(&trace)?;
            let rf = reference.as_deref().map(TraceFile::read).transpose()?;
            let opts = MmdOptions {
                sigma,
                subsample,
                reps,
                seed,
                skip,
            };
            let report = with_pool(resolve_threads(threads)?, || cmd_metrics(&tf, rf.as_ref(), which, &opts))??;
            print_json(&report)
        }
        Command::Diff { a, b, atol, rtol } => {
            let report = cmd_diff(&TraceFile::read(&a)?, &TraceFile::read(&b)?, atol, rtol)?;
            print_json(&report)?;
            if report.pass {
                Ok(())
            } else {
                Err(CliError::DiffFailed(match report.first_failure {
                    Some((c, t)) => format!("first failure at chain {c}, step {t}; max abs error {:e}", report.max_abs),
                    None => format!("max abs error {:e}", report.max_abs),
                }))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
