//! `wbtree`: run JSON experiment files and the verification suites.
//!
//! Exit status is 0 on success, 1 for unusable input and 2 when a run
//! completes but a contract fails.

mod spec;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use wbtree::analysis::{alpha_window, prop_bounds};
use wbtree::configs::realize_init;
use wbtree::dynamics::{write_events_csv, Process};
use wbtree::graphical::{check_duality, check_monotone, sample_window};
use wbtree::montecarlo::{
    proportion_of, replicas, run_spec, threshold_scan, write_results_csv, McConfig, ResultRow, RunSpec, SurvivalProxy,
};
use wbtree::stats::{EstimatorResult, MeanAccumulator};
use wbtree::verify::{run_suite, Suite, VerifyOptions};
use wbtree::{Configuration, MonteCarloError, TreeParams, VertexAddr};

use spec::{ExperimentSpec, Model};

#[derive(Parser)]
#[command(name = "wbtree", version, about = "Williams-Bjerknes experiments on the d-regular tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment file (JSON).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Output directory. Defaults to the experiment file's `output`, then `wbtree-out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the experiment file.
    #[arg(long, global = true, env = "WBTREE_SEED")]
    seed: Option<u64>,
    /// Replica count; overrides the experiment file.
    #[arg(long, global = true)]
    replicas: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the process named by the experiment file's model.
    Simulate,
    /// Run the branching coalescing walk with the experiment file's parameters.
    Dual,
    /// Check duality and monotonicity on sampled windows.
    GraphicalCheck,
    /// Print the threshold bounds for a degree.
    Bounds {
        #[arg(long)]
        d: Option<u32>,
    },
    /// Estimate a survival proxy across the experiment file's lambda grid.
    Scan,
    /// Run a verification suite.
    Verify {
        suite: Suite,
        /// Multiplies the replica counts of the suite.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

enum Failure {
    Usage(String),
    Contract(String),
}

impl From<MonteCarloError> for Failure {
    fn from(e: MonteCarloError) -> Self {
        match e {
            MonteCarloError::RadiusTooSmall { .. } | MonteCarloError::AllTruncated(_) => Failure::Contract(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("i/o: {e}"))
    }
}

fn usage<E: ToString>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

/// What a command hands back for writing.
struct Outcome {
    rows: Vec<ResultRow>,
    report: serde_json::Value,
    extra: Vec<(&'static str, Vec<u8>)>,
    truncated: u64,
    /// Contract violations found after the run.
    violations: Vec<String>,
}

struct Context {
    command: &'static str,
    spec_bytes: Vec<u8>,
    spec: Option<ExperimentSpec>,
    seed: u64,
    replicas: Option<u64>,
    workers: Option<usize>,
    out: PathBuf,
}

impl Context {
    fn spec(&self) -> Result<&ExperimentSpec, Failure> {
        self.spec.as_ref().ok_or_else(|| usage("this command needs --spec"))
    }

    fn cfg(&self) -> McConfig {
        McConfig { seed: self.seed, workers: self.workers }
    }

    fn replicas(&self) -> Result<u64, Failure> {
        Ok(self.replicas.unwrap_or(self.spec()?.replicas))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Contract(msg)) => {
            eprintln!("contract failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (spec_bytes, spec) = match &cli.spec {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| usage("experiment file is not UTF-8"))?;
            let spec = ExperimentSpec::parse(&text).map_err(|e| usage(format!("invalid experiment file: {e}")))?;
            (bytes, Some(spec))
        }
        None => (Vec::new(), None),
    };
    let seed = cli.seed.or(spec.as_ref().and_then(|s| s.seed)).unwrap_or(1);
    let out = cli
        .out
        .clone()
        .or_else(|| spec.as_ref().and_then(|s| s.output.clone()))
        .unwrap_or_else(|| PathBuf::from("wbtree-out"));
    let command = match &cli.command {
        Command::Simulate => "simulate",
        Command::Dual => "dual",
        Command::GraphicalCheck => "graphical-check",
        Command::Bounds { .. } => "bounds",
        Command::Scan => "scan",
        Command::Verify { .. } => "verify",
    };
    let mut ctx = Context { command, spec_bytes, spec, seed, replicas: cli.replicas, workers: cli.workers, out };

    let started = Instant::now();
    let outcome = match cli.command {
        Command::Simulate => {
            let process = match ctx.spec()?.model {
                Model::Wb => Process::Wb,
                Model::Bcrw => Process::Bcrw,
                other => return Err(usage(format!("simulate needs model wb or bcrw, got {other:?}"))),
            };
            simulate(&ctx, process)?
        }
        Command::Dual => simulate(&ctx, Process::Bcrw)?,
        Command::GraphicalCheck => graphical_check(&ctx)?,
        Command::Bounds { d } => {
            if let Some(d) = d {
                ctx.spec_bytes.extend(format!("bounds d {d}").into_bytes());
            }
            bounds(&ctx, d)?
        }
        Command::Scan => scan(&ctx)?,
        Command::Verify { suite, scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(usage("--scale must be positive"));
            }
            ctx.spec_bytes = format!("verify {} scale {scale}", suite.as_str()).into_bytes();
            verify(&ctx, suite, scale)
        }
    };
    write_outputs(&ctx, &outcome, started.elapsed().as_secs_f64())?;
    if outcome.violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Contract(outcome.violations.join("; ")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex(&h.finalize())
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    bytes
}

fn write_outputs(ctx: &Context, outcome: &Outcome, wall_clock: f64) -> Result<(), Failure> {
    fs::create_dir_all(&ctx.out)?;
    let mut results = Vec::new();
    write_results_csv(&mut results, &outcome.rows)?;
    let report = pretty(&outcome.report);
    fs::write(ctx.out.join("results.csv"), &results)?;
    fs::write(ctx.out.join("report.json"), &report)?;
    for (name, bytes) in &outcome.extra {
        fs::write(ctx.out.join(name), bytes)?;
    }
    let version = env!("CARGO_PKG_VERSION");
    let manifest = json!({
        "command": ctx.command,
        "version": version,
        "seed": ctx.seed,
        "spec_sha256": sha256(&[&ctx.spec_bytes]),
        "run_sha256": sha256(&[ctx.command.as_bytes(), &ctx.spec_bytes, &ctx.seed.to_le_bytes(), version.as_bytes()]),
        "results_sha256": sha256(&[&results, &report]),
        "wall_clock_seconds": wall_clock,
        "truncated": outcome.truncated,
        "violations": outcome.violations,
    });
    fs::write(ctx.out.join("manifest.json"), pretty(&manifest))?;
    for row in &outcome.rows {
        println!("{}", row.csv_line());
    }
    Ok(())
}

fn params(d: u32) -> Result<TreeParams, Failure> {
    TreeParams::new(d).map_err(usage)
}

struct RunSummary {
    values: Vec<f64>,
    truncated: bool,
    line: String,
    events: Vec<u8>,
}

fn simulate(ctx: &Context, process: Process) -> Result<Outcome, Failure> {
    let spec = ctx.spec()?;
    let n = ctx.replicas()?;
    let run = RunSpec {
        process,
        params: params(spec.d)?,
        lambda: spec.lambda().map_err(Failure::Usage)?,
        init: spec.init.clone(),
        boundary: spec.boundary.clone(),
        stop: spec.stop.clone(),
        record_events: spec.record_events,
    };
    let observables = spec.observables();
    let runs = run_spec(&run, n, &ctx.cfg(), |i, tr| {
        let mut events = Vec::new();
        write_events_csv(&mut events, i, tr).expect("writing to memory");
        RunSummary {
            values: observables.iter().map(|o| o.measure(tr)).collect(),
            truncated: tr.truncated(),
            line: format!("{},{},{},{},{}", tr.stop.as_str(), tr.end_time, tr.n_events, tr.final_state.len(), tr.truncated()),
            events,
        }
    })?;

    let truncated = runs.iter().filter(|r| r.truncated).count() as u64;
    let label = ctx.command;
    let mut rows = Vec::new();
    let mut estimates = serde_json::Map::new();
    for (j, obs) in observables.iter().enumerate() {
        let est = if obs.is_indicator() {
            let flags: Vec<Option<bool>> = runs.iter().map(|r| (!r.truncated).then(|| r.values[j] > 0.5)).collect();
            proportion_of(&flags)?
        } else {
            let acc: MeanAccumulator = runs.iter().filter(|r| !r.truncated).map(|r| r.values[j]).collect();
            if acc.count() == 0 {
                return Err(MonteCarloError::AllTruncated(runs.len()).into());
            }
            acc.result(truncated)
        };
        rows.push(ResultRow::estimate(label, obs.name(), Some(run.lambda), spec.d, &est));
        estimates.insert(obs.name().into(), serde_json::to_value(est).expect("serializable"));
    }

    let mut violations = Vec::new();
    for exp in &spec.expect {
        let Some(row) = rows.iter().find(|r| r.metric == exp.metric.name()) else {
            violations.push(format!("{} was expected but not observed", exp.metric.name()));
            continue;
        };
        let tol = exp.within_stderr * row.stderr.unwrap_or(0.0) + exp.abs_tol;
        if (row.value - exp.value).abs() > tol {
            violations.push(format!("{} = {} is farther than {tol} from {}", row.metric, row.value, exp.value));
        }
    }

    let mut trajectories = b"replica,stop,end_time,n_events,final_size,truncated\n".to_vec();
    let mut events = b"replica,time,kind,u,v\n".to_vec();
    for (i, r) in runs.iter().enumerate() {
        writeln!(trajectories, "{i},{}", r.line)?;
        events.extend_from_slice(&r.events);
    }
    let mut extra = vec![("trajectories.csv", trajectories)];
    if spec.record_events {
        extra.push(("events.csv", events));
    }
    let report = json!({
        "command": label,
        "process": process,
        "spec": spec,
        "seed": ctx.seed,
        "replicas": n,
        "estimates": estimates,
    });
    Ok(Outcome { rows, report, extra, truncated, violations })
}

fn graphical_check(ctx: &Context) -> Result<Outcome, Failure> {
    let spec = ctx.spec()?;
    let window = spec.window.as_ref().ok_or_else(|| usage("graphical-check needs \"window\""))?;
    let p = params(spec.d)?;
    let lambda = spec.lambda().map_err(Failure::Usage)?;
    let n = ctx.replicas()?;
    let cfg = ctx.cfg();
    let observe: Configuration = match &spec.observe {
        Some(v) => v.iter().cloned().collect(),
        None => Configuration::singleton(VertexAddr::origin()),
    };
    let key = cfg.key("graphical/window");
    let first = sample_window(p, &window.region, window.horizon, window.lambda_max, &key.index(0)).map_err(usage)?;
    let mut arrows = b"u,v,kind,time,mark\n".to_vec();
    first.write_csv(&mut arrows)?;

    let outcomes = replicas(&cfg, "graphical", 0, n, &(), |_, rng, i| {
        let w = sample_window(p, &window.region, window.horizon, window.lambda_max, &key.index(i))?;
        let a = realize_init(&spec.init, p, rng)?;
        let t = w.horizon();
        let dual = check_duality(&w, &a, &observe, 0.0, t, lambda)?;
        let grown: Configuration = a.iter().chain(observe.iter()).cloned().collect();
        let mono = check_monotone(&w, &a, &grown, 0.0, t, lambda, w.lambda_max())?;
        Ok((dual, mono))
    })?;
    let dual_ok = outcomes.iter().filter(|o| o.0.is_some()).count() as u64;
    let mono_ok = outcomes.iter().filter(|o| o.1).count() as u64;
    let hits: Vec<Option<bool>> = outcomes.iter().map(|o| o.0).collect();
    let hit = proportion_of(&hits).unwrap_or_else(|_| EstimatorResult::proportion(0, 0, n));
    let rows = vec![
        ResultRow::value("graphical", "duality_holds_fraction", Some(lambda), spec.d, dual_ok as f64 / n as f64, n),
        ResultRow::value("graphical", "monotone_holds_fraction", Some(lambda), spec.d, mono_ok as f64 / n as f64, n),
        ResultRow::estimate("graphical", "reaches_observed", Some(lambda), spec.d, &hit),
    ];
    let mut violations = Vec::new();
    if dual_ok < n {
        violations.push(format!("duality failed in {} of {n} windows", n - dual_ok));
    }
    if mono_ok < n {
        violations.push(format!("monotonicity failed in {} of {n} windows", n - mono_ok));
    }
    let report = json!({
        "command": "graphical-check",
        "spec": spec,
        "seed": ctx.seed,
        "windows": n,
        "duality_holds": dual_ok,
        "monotone_holds": mono_ok,
        "reaches_observed": hit,
    });
    Ok(Outcome { rows, report, extra: vec![("arrows.csv", arrows)], truncated: 0, violations })
}

fn bounds(ctx: &Context, d: Option<u32>) -> Result<Outcome, Failure> {
    let d = match (d, &ctx.spec) {
        (Some(d), _) => d,
        (None, Some(spec)) => spec.d,
        (None, None) => return Err(usage("bounds needs --d or --spec")),
    };
    let b = prop_bounds(d).map_err(usage)?;
    let mut rows = vec![
        ResultRow::value("bounds", "lambda_l_lower", None, d, b.lambda_l_lower, 1),
        ResultRow::value("bounds", "lambda_l_upper", None, d, b.lambda_l_upper, 1),
        ResultRow::value("bounds", "lambda_c_upper", None, d, b.lambda_c_upper, 1),
    ];
    let lambda = ctx.spec.as_ref().and_then(|s| s.lambda);
    let window = lambda.and_then(|l| alpha_window(d, l));
    if let (Some(l), Some((lo, hi))) = (lambda, window) {
        rows.push(ResultRow::value("bounds", "alpha_low", Some(l), d, lo, 1));
        rows.push(ResultRow::value("bounds", "alpha_high", Some(l), d, hi, 1));
    }
    let report = json!({ "command": "bounds", "bounds": b, "lambda": lambda, "alpha_window": window });
    Ok(Outcome { rows, report, extra: Vec::new(), truncated: 0, violations: Vec::new() })
}

fn scan(ctx: &Context) -> Result<Outcome, Failure> {
    let spec = ctx.spec()?;
    let grid = spec.lambda_grid.as_ref().ok_or_else(|| usage("scan needs \"lambda_grid\""))?;
    let proxy = spec.proxy.clone().unwrap_or(SurvivalProxy::OriginOccupiedAt { t: 30.0 });
    let rep = threshold_scan(params(spec.d)?, grid, &proxy, &spec.boundary, ctx.replicas()?, &ctx.cfg())?;
    let rows: Vec<ResultRow> =
        rep.points.iter().map(|(l, e)| ResultRow::estimate("scan", proxy.name(), Some(*l), spec.d, e)).collect();
    let truncated = rows.iter().map(|r| r.truncated).sum();
    let report = json!({ "command": "scan", "spec": spec, "seed": ctx.seed, "scan": rep });
    Ok(Outcome { rows, report, extra: Vec::new(), truncated, violations: Vec::new() })
}

fn verify(ctx: &Context, suite: Suite, scale: f64) -> Outcome {
    let opts = VerifyOptions { seed: ctx.seed, workers: ctx.workers, scale };
    let rep = run_suite(suite, &opts);
    for c in &rep.checks {
        eprintln!("{:<28} {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    let violations = if rep.passed() {
        Vec::new()
    } else {
        rep.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
    };
    Outcome { rows: rep.rows(), report: serde_json::to_value(&rep).expect("serializable"), extra: Vec::new(), truncated: rep.truncated(), violations }
}
