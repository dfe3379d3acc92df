//! Run configuration: plain `key = value` text plus command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parmcmc_core::JacobianMode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Mala,
    Hmc,
    HmcParallelLeapfrog,
    Gibbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sequential,
    DeerDense,
    QuasiDeer,
    BlockQuasiDeer,
}

impl Method {
    pub fn mode(self) -> Option<JacobianMode> {
        match self {
            Method::Sequential => None,
            Method::DeerDense => Some(JacobianMode::Dense),
            Method::QuasiDeer => Some(JacobianMode::DiagStochastic),
            Method::BlockQuasiDeer => Some(JacobianMode::Block2x2Stochastic),
        }
    }
}

/// Diagonal preconditioner choice for the Hutchinson estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum Preconditioner {
    None,
    /// Per-coordinate standard deviations of a short sequential pilot chain.
    Auto,
    Values(Vec<f64>),
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!(concat!("unknown ", $what, " '{}' (expected one of: {})"), s, [$($name),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(SamplerKind, "sampler", {
    "mala" => SamplerKind::Mala,
    "hmc" => SamplerKind::Hmc,
    "hmc-parallel-leapfrog" => SamplerKind::HmcParallelLeapfrog,
    "gibbs" => SamplerKind::Gibbs,
});

keyword_enum!(Method, "method", {
    "sequential" => Method::Sequential,
    "deer-dense" => Method::DeerDense,
    "quasi-deer" => Method::QuasiDeer,
    "block-quasi-deer" => Method::BlockQuasiDeer,
});

/// Every setting of a run. `to_text` and `parse_text` round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sampler: SamplerKind,
    /// `std-normal`, `rosenbrock`, `mog`, `blr-synthetic`, `eight-schools`,
    /// or a path to a CSV design matrix (last column the 0/1 label).
    pub target: String,
    pub method: Method,
    pub t: usize,
    pub b: usize,
    pub seed: u64,
    pub eps: f64,
    pub leapfrog_steps: usize,
    pub mass: Option<Vec<f64>>,
    pub atol: f64,
    pub rtol: f64,
    /// `None` uses the length-based default.
    pub max_iters: Option<usize>,
    pub hutchinson_samples: usize,
    pub damping: f64,
    pub clip: f64,
    pub window: Option<usize>,
    pub full_trace: bool,
    pub orthogonal: bool,
    pub preconditioner: Preconditioner,
    /// Sequential steps from the initial draw before the recorded chain starts.
    pub burn_in: usize,
    pub warmups: usize,
    pub reps: usize,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// Also write the trace as CSV next to the binary file.
    pub csv: bool,
    pub dim: usize,
    pub rows: usize,
    pub prior_precision: f64,
    pub standardize: bool,
    pub rosenbrock: [f64; 4],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Mala,
            target: "std-normal".into(),
            method: Method::Sequential,
            t: 1000,
            b: 1,
            seed: 0,
            eps: 0.1,
            leapfrog_steps: 8,
            mass: None,
            atol: 1e-4,
            rtol: 1e-3,
            max_iters: None,
            hutchinson_samples: 1,
            damping: 1.0,
            clip: f64::INFINITY,
            window: None,
            full_trace: false,
            orthogonal: false,
            preconditioner: Preconditioner::None,
            burn_in: 3,
            warmups: 0,
            reps: 1,
            threads: None,
            out: None,
            csv: false,
            dim: 2,
            rows: 1000,
            prior_precision: 1.0,
            standardize: true,
            rosenbrock: [0.0, 1.0, 1.0, 0.1],
        }
    }
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "sampler",
    "target",
    "method",
    "T",
    "B",
    "seed",
    "eps",
    "leapfrog_steps",
    "mass",
    "atol",
    "rtol",
    "max_iters",
    "hutchinson_samples",
    "damping",
    "clip",
    "window",
    "full_trace",
    "orthogonal",
    "preconditioner",
    "burn_in",
    "warmups",
    "reps",
    "threads",
    "out",
    "csv",
    "dim",
    "rows",
    "prior_precision",
    "standardize",
    "rosenbrock",
];

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("{key}: {e} (got '{value}')")))
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<f64>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> CliResult<Option<T>>
where
    T::Err: fmt::Display,
{
    match value.trim() {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list_text(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key = value` setting. Dashes in keys are accepted for underscores.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "sampler" => self.sampler = parse(k, value)?,
            "target" => self.target = value.trim().to_string(),
            "method" => self.method = parse(k, value)?,
            "T" | "t" => self.t = parse(k, value)?,
            "B" | "b" => self.b = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "eps" => self.eps = parse(k, value)?,
            "leapfrog_steps" | "L" => self.leapfrog_steps = parse(k, value)?,
            "mass" => {
                self.mass = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse_list(k, v)?),
                }
            }
            "atol" => self.atol = parse(k, value)?,
            "rtol" => self.rtol = parse(k, value)?,
            "max_iters" => self.max_iters = parse_optional(k, value)?,
            "hutchinson_samples" => self.hutchinson_samples = parse(k, value)?,
            "damping" => self.damping = parse(k, value)?,
            "clip" => self.clip = parse(k, value)?,
            "window" => self.window = parse_optional(k, value)?,
            "full_trace" => self.full_trace = parse_bool(k, value)?,
            "orthogonal" => self.orthogonal = parse_bool(k, value)?,
            "preconditioner" => {
                self.preconditioner = match value.trim() {
                    "none" | "" => Preconditioner::None,
                    "auto" => Preconditioner::Auto,
                    v => Preconditioner::Values(parse_list(k, v)?),
                }
            }
            "burn_in" => self.burn_in = parse(k, value)?,
            "warmups" => self.warmups = parse(k, value)?,
            "reps" => self.reps = parse(k, value)?,
            "threads" => self.threads = parse_optional(k, value)?,
            "out" => {
                self.out = match value.trim() {
                    "none" | "" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "csv" => self.csv = parse_bool(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "rows" => self.rows = parse(k, value)?,
            "prior_precision" => self.prior_precision = parse(k, value)?,
            "standardize" => self.standardize = parse_bool(k, value)?,
            "rosenbrock" => {
                let v = parse_list(k, value)?;
                self.rosenbrock = v
                    .try_into()
                    .map_err(|_| CliError::Usage("rosenbrock: expected a,b,var1,var2".into()))?;
            }
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> CliResult<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Canonical key/value pairs covering every field.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("sampler", self.sampler.to_string());
        put("target", self.target.clone());
        put("method", self.method.to_string());
        put("T", self.t.to_string());
        put("B", self.b.to_string());
        put("seed", self.seed.to_string());
        put("eps", format!("{:?}", self.eps));
        put("leapfrog_steps", self.leapfrog_steps.to_string());
        put("mass", self.mass.as_deref().map_or("none".into(), list_text));
        put("atol", format!("{:?}", self.atol));
        put("rtol", format!("{:?}", self.rtol));
        put("max_iters", opt(self.max_iters));
        put("hutchinson_samples", self.hutchinson_samples.to_string());
        put("damping", format!("{:?}", self.damping));
        put("clip", format!("{:?}", self.clip));
        put("window", opt(self.window));
        put("full_trace", self.full_trace.to_string());
        put("orthogonal", self.orthogonal.to_string());
        put(
            "preconditioner",
            match &self.preconditioner {
                Preconditioner::None => "none".into(),
                Preconditioner::Auto => "auto".into(),
                Preconditioner::Values(v) => list_text(v),
            },
        );
        put("burn_in", self.burn_in.to_string());
        put("warmups", self.warmups.to_string());
        put("reps", self.reps.to_string());
        put("threads", opt(self.threads));
        put("out", self.out.as_ref().map_or("none".into(), |p| p.display().to_string()));
        put("csv", self.csv.to_string());
        put("dim", self.dim.to_string());
        put("rows", self.rows.to_string());
        put("prior_precision", format!("{:?}", self.prior_precision));
        put("standardize", self.standardize.to_string());
        put("rosenbrock", list_text(&self.rosenbrock));
        m
    }

    pub fn to_text(&self) -> String {
        let pairs = self.pairs();
        KEYS.iter().map(|k| format!("{k} = {}\n", pairs[*k])).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, msg: &str| Err(CliError::Usage(format!("{field}: {msg}")));
        if self.t == 0 {
            return bad("T", "must be at least 1");
        }
        if self.b == 0 {
            return bad("B", "must be at least 1");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive");
        }
        if self.leapfrog_steps == 0 {
            return bad("leapfrog_steps", "must be at least 1");
        }
        if !(self.atol > 0.0) {
            return bad("atol", "must be positive");
        }
        if !(self.rtol >= 0.0) {
            return bad("rtol", "must be non-negative");
        }
        if self.max_iters == Some(0) {
            return bad("max_iters", "must be at least 1");
        }
        if self.hutchinson_samples == 0 {
            return bad("hutchinson_samples", "must be at least 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping", "must lie in (0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if self.window == Some(0) {
            return bad("window", "must be at least 1");
        }
        if self.reps == 0 {
            return bad("reps", "must be at least 1");
        }
        if self.threads == Some(0) {
            return bad("threads", "must be at least 1");
        }
        if self.dim == 0 || self.rows == 0 {
            return bad("dim", "dim and rows must be positive");
        }
        if self.method == Method::BlockQuasiDeer && self.sampler != SamplerKind::HmcParallelLeapfrog {
            return bad("method", "block-quasi-deer needs sampler hmc-parallel-leapfrog");
        }
        if self.sampler == SamplerKind::Gibbs && self.target != "eight-schools" {
            return bad("target", "the gibbs sampler runs on target eight-schools");
        }
        if self.sampler != SamplerKind::Gibbs && self.target == "eight-schools" {
            return bad("sampler", "target eight-schools needs sampler gibbs");
        }
        if self.orthogonal && matches!(self.sampler, SamplerKind::Gibbs | SamplerKind::HmcParallelLeapfrog) {
            return bad("orthogonal", "only available for whole-chain mala and hmc runs");
        }
        if self.preconditioner == Preconditioner::Auto && self.sampler == SamplerKind::HmcParallelLeapfrog {
            return bad("preconditioner", "auto is not available for hmc-parallel-leapfrog");
        }
        let named = ["std-normal", "rosenbrock", "mog", "blr-synthetic", "eight-schools"];
        if !named.contains(&self.target.as_str()) && !self.target.ends_with(".csv") {
            return bad(
                "target",
                &format!("unknown target '{}' (expected one of {} or a .csv path)", self.target, named.join(", ")),
            );
        }
        if let Some(m) = &self.mass {
            if m.iter().any(|v| !(*v > 0.0)) {
                return bad("mass", "entries must be positive");
            }
        }
        if let Preconditioner::Values(p) = &self.preconditioner {
            if p.iter().any(|v| !(*v > 0.0)) {
                return bad("preconditioner", "entries must be positive");
            }
        }
        if self.target.ends_with(".csv") && !Path::new(&self.target).exists() {
            return bad("target", &format!("file {} does not exist", self.target));
        }
        Ok(())
    }

    /// Seed of chain `b`.
    pub fn chain_seed(&self, chain: usize) -> u64 {
        self.seed ^ chain as u64
    }
}
