use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use parmcmc_cli::commands::{moved_fraction, write_bench_csv};
use parmcmc_cli::{
    cmd_bench, cmd_diff, cmd_metrics, execute, BenchGrid, Method, Metric, MetricsReport, MmdOptions, RunConfig,
    SamplerKind, TraceFile, TraceHeader,
};
use parmcmc_core::targets::exact_samples;
use parmcmc_core::ModelSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_parmcmc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn parmcmc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sequential_and_quasi_deer_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq.bin");
    let par = dir.path().join("par.bin");
    let base = ["run", "--sampler", "mala", "--target", "std-normal", "--T", "3000", "--B", "2", "--seed", "11"];
    let o = run(&[&base[..], &["--method", "sequential", "--out", path_str(&seq)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[&base[..], &["--method", "quasi-deer", "--out", path_str(&par)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&o);
    assert_eq!(report["chains"].as_array().unwrap().len(), 2);
    for c in report["chains"].as_array().unwrap() {
        assert_eq!(c["converged"], true);
        assert!(c["iterations"].as_u64().unwrap() >= 1);
        assert!(!c["delta_history"].as_array().unwrap().is_empty());
        let acc = c["acceptance_rate"].as_f64().unwrap();
        assert!(acc > 0.5 && acc <= 1.0);
    }
    assert!(dir.path().join("par.report.json").exists());
    let o = run(&["diff", path_str(&par), path_str(&seq)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn chains_use_distinct_seed_streams() {
    let cfg = RunConfig {
        t: 50,
        b: 3,
        seed: 5,
        ..RunConfig::default()
    };
    let out = execute(&cfg).unwrap();
    assert_ne!(out.trace.chains[0], out.trace.chains[1]);
    let single = execute(&RunConfig {
        b: 1,
        seed: 5 ^ 2,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(single.trace.chains[0], out.trace.chains[2]);
}

#[test]
fn single_step_runs_converge_in_two_iterations() {
    let cases = [
        (SamplerKind::Mala, "std-normal", Method::DeerDense),
        (SamplerKind::Mala, "mog", Method::QuasiDeer),
        (SamplerKind::Hmc, "rosenbrock", Method::DeerDense),
        (SamplerKind::Gibbs, "eight-schools", Method::QuasiDeer),
        (SamplerKind::HmcParallelLeapfrog, "std-normal", Method::BlockQuasiDeer),
    ];
    for (sampler, target, method) in cases {
        let cfg = RunConfig {
            sampler,
            target: target.into(),
            method,
            t: 1,
            ..RunConfig::default()
        };
        let out = execute(&cfg).unwrap();
        let seq = execute(&RunConfig {
            method: Method::Sequential,
            ..cfg.clone()
        })
        .unwrap();
        let c = &out.report.chains[0];
        assert!(c.converged, "{sampler} {method}");
        if sampler != SamplerKind::HmcParallelLeapfrog {
            assert!(c.iterations <= 2, "{sampler} {method}: {} iterations", c.iterations);
        }
        let d = cmd_diff(&out.trace, &seq.trace, 1e-4, 1e-3).unwrap();
        assert!(d.pass, "{sampler} {method}: {d:?}");
    }
}

#[test]
fn diff_identical_and_perturbed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let o = run(&["run", "--T", "200", "--out", path_str(&a)]);
    assert_eq!(code(&o), 0);
    let o = run(&["diff", path_str(&a), path_str(&a)]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["max_abs"], 0.0);

    let mut tf = TraceFile::read(&a).unwrap();
    let x = &mut tf.chains[0].step_mut(137)[1];
    *x += 10.0 * 1e-4 + 1e-3 * x.abs() * 2.0;
    let b = dir.path().join("b.bin");
    tf.write(&b).unwrap();
    let o = run(&["diff", path_str(&b), path_str(&a)]);
    assert_eq!(code(&o), 3);
    let r = json(&o);
    assert_eq!(r["first_failure"], serde_json::json!([0, 137]));
    assert_eq!(r["failing_steps"], 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 137"));
}

#[test]
fn diff_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    assert_eq!(code(&run(&["run", "--T", "20", "--out", path_str(&a)])), 0);
    assert_eq!(code(&run(&["run", "--T", "21", "--out", path_str(&b)])), 0);
    let o = run(&["diff", path_str(&a), path_str(&b)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn converged_quasi_deer_matches_sequential_on_mog() {
    let cfg = RunConfig {
        target: "mog".into(),
        method: Method::QuasiDeer,
        t: 2000,
        seed: 3,
        clip: 1.0,
        max_iters: Some(500),
        ..RunConfig::default()
    };
    let par = execute(&cfg).unwrap();
    assert!(par.report.chains[0].converged);
    let seq = execute(&RunConfig {
        method: Method::Sequential,
        ..cfg
    })
    .unwrap();
    assert!(cmd_diff(&par.trace, &seq.trace, 1e-4, 1e-3).unwrap().pass);
}

#[test]
fn usage_errors_name_the_field_and_exit_one() {
    for (args, field) in [
        (vec!["run", "--T", "0"], "T"),
        (vec!["run", "--damping", "1.5"], "damping"),
        (vec!["run", "--method", "newton"], "method"),
        (vec!["run", "--target", "/nonexistent/data.csv"], "target"),
        (vec!["run", "--sampler", "gibbs"], "target"),
        (vec!["run", "--method", "block-quasi-deer"], "method"),
    ] {
        let o = run(&args);
        assert_eq!(code(&o), 1, "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("{field}:")), "{args:?}: {err}");
    }
    assert_eq!(code(&run(&["run", "--no-such-flag"])), 1);
}

#[test]
fn divergence_exits_two() {
    // Unpreconditioned quasi-DEER drives the Gibbs variances negative.
    let o = run(&["run", "--sampler", "gibbs", "--target", "eight-schools", "--method", "quasi-deer", "--T", "2000"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn thread_count_env_is_honored() {
    let o = bin().args(["run", "--T", "10"]).env("PARMCMC_THREADS", "0").output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("PARMCMC_THREADS"));
    let o = bin().args(["run", "--T", "10"]).env("PARMCMC_THREADS", "2").output().unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .args(["run", "--T", "10", "--threads", "1"])
        .env("PARMCMC_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "flag takes precedence over the environment");
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.bin");
    let o = run(&[
        "run", "--sampler", "hmc", "--target", "rosenbrock", "--method", "deer-dense", "--T", "300", "--seed", "9",
        "--damping", "0.5", "--clip", "1", "--eps", "0.5", "--set", "rosenbrock=0,0.03,100,1", "--out", path_str(&first),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&o);
    let cfg_path = dir.path().join("echo.cfg");
    let second = dir.path().join("second.bin");
    let mut text = report["config_text"].as_str().unwrap().to_string();
    text = text.replace(&format!("out = {}", path_str(&first)), &format!("out = {}", path_str(&second)));
    std::fs::write(&cfg_path, text).unwrap();
    let o = run(&["run", "--config", path_str(&cfg_path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn sidecar_header_matches_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.bin");
    let o = run(&["run", "--T", "40", "--B", "3", "--dim", "4", "--csv", "--out", path_str(&p)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 3 * 40 * 4 * 8);
    let head: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!((head["T"].as_u64(), head["B"].as_u64(), head["D"].as_u64()), (Some(40), Some(3), Some(4)));
    assert_eq!(head["dtype"], "f64");
    assert_eq!(head["config"]["dim"], "4");
    let mut r = csv::Reader::from_path(dir.path().join("t.csv")).unwrap();
    assert_eq!(r.records().count(), 120);
}

#[test]
fn full_trace_writes_one_file_per_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.bin");
    let o = run(&["run", "--T", "64", "--method", "deer-dense", "--full-trace", "--out", path_str(&p)]);
    assert_eq!(code(&o), 0);
    let iters = json(&o)["chains"][0]["iterations"].as_u64().unwrap() as usize;
    let last = TraceFile::read(&dir.path().join(format!("t.iter{}.bin", iters - 1))).unwrap();
    assert_eq!(last.chains, TraceFile::read(&p).unwrap().chains);
}

#[test]
fn orthogonal_run_matches_sequential() {
    let cfg = RunConfig {
        target: "blr-synthetic".into(),
        dim: 5,
        rows: 200,
        eps: 0.02,
        method: Method::QuasiDeer,
        orthogonal: true,
        t: 500,
        max_iters: Some(400),
        ..RunConfig::default()
    };
    let par = execute(&cfg).unwrap();
    assert!(par.report.chains[0].converged);
    let seq = execute(&RunConfig {
        method: Method::Sequential,
        orthogonal: false,
        ..cfg
    })
    .unwrap();
    assert!(cmd_diff(&par.trace, &seq.trace, 1e-4, 1e-3).unwrap().pass);
}

#[test]
fn csv_design_matrix_target() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("credit.csv");
    let (ds, _) = parmcmc_core::targets::synthetic_credit(1, 100, 3).unwrap();
    ds.write_csv(&data).unwrap();
    let o = run(&["run", "--target", path_str(&data), "--T", "50", "--eps", "0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["D"], 3);
}

#[test]
fn bench_single_cell_and_failed_cells() {
    let base = RunConfig {
        t: 100,
        ..RunConfig::default()
    };
    let grid = BenchGrid {
        bs: vec![1],
        ts: vec![100],
        methods: vec![Method::QuasiDeer],
    };
    let rows = cmd_bench(&base, &grid);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].status, "ok");
    assert_eq!(rows[0].converged_fraction, 1.0);
    let mut buf = Vec::new();
    write_bench_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "sampler,method,B,T,median_seconds,iterations,converged_fraction,status");

    let gibbs = RunConfig {
        sampler: SamplerKind::Gibbs,
        target: "eight-schools".into(),
        ..base.clone()
    };
    let rows = cmd_bench(
        &gibbs,
        &BenchGrid {
            bs: vec![1, 2],
            ts: vec![500],
            methods: vec![Method::Sequential, Method::QuasiDeer],
        },
    );
    assert_eq!(rows.len(), 4);
    assert!(rows[..2].iter().all(|r| r.status == "ok"));
    assert!(rows[2..].iter().all(|r| r.status.starts_with("error: diverged")));

    let capped = cmd_bench(
        &RunConfig {
            max_iters: Some(1),
            ..base
        },
        &grid,
    );
    assert_eq!(capped[0].status, "not-converged");
}

#[test]
fn bench_cli_writes_csv() {
    let o = run(&["bench", "--bs", "1,2", "--ts", "50", "--methods", "sequential"]);
    assert_eq!(code(&o), 0);
    let mut r = csv::Reader::from_reader(&o.stdout[..]);
    assert_eq!(r.records().count(), 2);
}

fn iid_trace(n: usize, seed: u64) -> TraceFile {
    let model = ModelSpec::StdNormal { dim: 2 }.build().unwrap();
    let s = exact_samples(model.as_ref(), n, seed).unwrap();
    TraceFile::new(TraceHeader::new(n, 1, 2, "exact", seed, BTreeMap::new()), vec![s]).unwrap()
}

#[test]
fn metrics_self_consistency() {
    let tf = iid_trace(4000, 1);
    let opts = MmdOptions {
        subsample: 1000,
        reps: 20,
        ..MmdOptions::default()
    };
    let MetricsReport::Mmd { estimate, comparison, .. } = cmd_metrics(&tf, None, Metric::Mmd, &opts).unwrap() else {
        panic!("expected mmd");
    };
    assert_eq!(comparison, "first-half-vs-second-half");
    assert!(estimate.mmd2.abs() < 3.0 * estimate.se, "{estimate:?}");
    assert!(estimate.sigma > 0.0);

    let MetricsReport::Ess { chains } = cmd_metrics(&tf, None, Metric::Ess, &opts).unwrap() else {
        panic!("expected ess");
    };
    for e in &chains[0].per_dim {
        assert!((e / 4000.0 - 1.0).abs() < 0.1, "ess {e}");
    }
}

#[test]
fn metrics_reject_dimension_mismatch() {
    let a = iid_trace(100, 1);
    let model = ModelSpec::StdNormal { dim: 3 }.build().unwrap();
    let s = exact_samples(model.as_ref(), 100, 2).unwrap();
    let b = TraceFile::new(TraceHeader::new(100, 1, 3, "exact", 2, BTreeMap::new()), vec![s]).unwrap();
    assert!(cmd_metrics(&a, Some(&b), Metric::Mmd, &MmdOptions::default()).is_err());
}

#[test]
fn acceptance_of_all_accept_trace_is_one() {
    let out = execute(&RunConfig {
        sampler: SamplerKind::Gibbs,
        target: "eight-schools".into(),
        t: 300,
        ..RunConfig::default()
    })
    .unwrap();
    assert_eq!(out.report.chains[0].acceptance_rate, 1.0);
    assert_eq!(moved_fraction(&out.trace.chains[0]), 1.0);
    let MetricsReport::Acceptance { mean, .. } =
        cmd_metrics(&out.trace, None, Metric::Acceptance, &MmdOptions::default()).unwrap()
    else {
        panic!("expected acceptance");
    };
    assert_eq!(mean, 1.0);
}

#[test]
fn metrics_cli_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let p: PathBuf = dir.path().join("x.bin");
    iid_trace(600, 4).write(&p).unwrap();
    let o = run(&["metrics", path_str(&p), "--which", "mmd", "--subsample", "200", "--reps", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o);
    assert_eq!(r["metric"], "mmd");
    assert_eq!(r["subsample"], 200);
    assert_eq!(r["reps"], 5);
    assert!(r["sigma"].as_f64().unwrap() > 0.0);
    let o = run(&["metrics", path_str(&p), "--which", "ess"]);
    assert_eq!(code(&o), 0);
    assert!(json(&o)["chains"][0]["min"].as_f64().unwrap() > 300.0);
}

#[test]
fn gibbs_long_chain_with_preconditioner_converges() {
    let cfg = RunConfig {
        sampler: SamplerKind::Gibbs,
        target: "eight-schools".into(),
        method: Method::QuasiDeer,
        t: 100_000,
        hutchinson_samples: 3,
        preconditioner: parmcmc_cli::Preconditioner::Auto,
        max_iters: Some(300),
        ..RunConfig::default()
    };
    let out = execute(&cfg).unwrap();
    let c = &out.report.chains[0];
    assert!(c.converged, "{} iterations", c.iterations);
    assert!(c.iterations > 1);
}
