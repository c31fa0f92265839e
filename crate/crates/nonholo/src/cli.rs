//! Command-line front end: `run`, `compare`, `check`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 drift abort.

use crate::error::Error;
use crate::integrate::{IntegratorOpts, Scheme, Stabilization};
use crate::scenarios::ScenarioConfig;
use crate::sim::{build_report, csv_header, run, write_csv, RunMethod, RunOutput};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "nonholo",
    about = "Constrained dynamics in phase space: multiplier-adjoined and transposition-corrected flows with a Lagrange-d'Alembert reference",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate one scenario under one method; write CSV samples and
    /// print a JSON run report.
    Run(RunArgs),
    /// Run two or more methods on a shared sample grid and report
    /// per-coordinate differences as JSON.
    Compare(CompareArgs),
    /// Run the cross-module invariant suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,

    /// End time in seconds (integration starts at 0).
    #[arg(long, default_value_t = 2.0)]
    t_end: f64,

    /// Fixed RK4 step size; mutually exclusive with --adaptive.
    #[arg(long)]
    dt: Option<f64>,

    /// Adaptive Dormand-Prince 5(4) stepping (the default when --dt is
    /// absent).
    #[arg(long)]
    adaptive: bool,

    /// Relative tolerance for adaptive stepping (absolute tolerance is
    /// 100x smaller).
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,

    /// Number of dense-output sample points.
    #[arg(long, default_value_t = 400)]
    samples: usize,

    /// Post-step stabilization: none | projection.
    #[arg(long, default_value = "none")]
    stabilize: String,

    /// Abort when max |g_k| exceeds this threshold.
    #[arg(long, default_value_t = 1e-3)]
    drift_abort: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Method: oracle | dirac | flannery.
    #[arg(long)]
    method: String,

    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Extra observable columns, semicolon-separated expressions over
    /// the phase variables.
    #[arg(long)]
    observables: Option<String>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Comma-separated list of two or more methods.
    #[arg(long)]
    methods: String,

    /// Optional path for the JSON report (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Only run invariants whose module or name contains this substring.
    #[arg(long, default_value = "")]
    filter: String,
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Syntax { .. }
        | Error::UnknownFunction { .. }
        | Error::UnboundVariable { .. }
        | Error::DuplicateBinding { .. }
        | Error::Domain { .. }
        | Error::InvalidSystem(_)
        | Error::Schema { .. }
        | Error::ConstraintViolated { .. }
        | Error::UnknownScenario(_) => 1,
        Error::DriftAbort { .. } => 3,
        _ => 2,
    }
}

fn load_scenario(spec: &str) -> crate::Result<ScenarioConfig> {
    if crate::scenarios::BUILTIN_NAMES.contains(&spec) {
        ScenarioConfig::builtin(spec)
    } else if std::path::Path::new(spec).exists() {
        ScenarioConfig::load(std::path::Path::new(spec))
    } else {
        Err(Error::UnknownScenario(spec.to_string()))
    }
}

fn build_opts(common: &CommonArgs) -> crate::Result<IntegratorOpts> {
    if common.dt.is_some() && common.adaptive {
        return Err(Error::InvalidSystem(
            "--dt and --adaptive are mutually exclusive".into(),
        ));
    }
    let scheme = match common.dt {
        Some(dt) if dt > 0.0 => Scheme::Rk4 { dt },
        Some(_) => return Err(Error::InvalidSystem("--dt must be positive".into())),
        None => Scheme::Dp45 {
            rel_tol: common.tol,
            abs_tol: common.tol * 1e-2,
        },
    };
    let stabilization = match common.stabilize.as_str() {
        "none" => Stabilization::None,
        "projection" => Stabilization::Projection,
        other => {
            return Err(Error::InvalidSystem(format!(
                "unknown stabilization `{other}`"
            )))
        }
    };
    if common.t_end <= 0.0 {
        return Err(Error::InvalidSystem("--t-end must be positive".into()));
    }
    Ok(IntegratorOpts {
        scheme,
        max_steps: 2_000_000,
        drift_abort: Some(common.drift_abort),
        samples: common.samples.max(2),
        stabilization,
    })
}

fn cmd_run(args: &RunArgs) -> crate::Result<i32> {
    let cfg = load_scenario(&args.common.scenario)?;
    let method: RunMethod = args.method.parse()?;
    let opts = build_opts(&args.common)?;
    // scenario-declared observables first, then the flag's additions
    let mut observables: Vec<String> = cfg.observables.clone();
    if let Some(extra) = args.observables.as_deref() {
        observables.extend(
            extra
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned),
        );
    }
    for src in &observables {
        crate::brackets::Observable::parse(&cfg.spec, src)?;
    }

    let out = run(&cfg, method, args.common.t_end, &opts)?;
    let csv_path = match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| Error::Schema {
                pointer: String::new(),
                detail: format!("cannot create {}: {e}", path.display()),
            })?;
            let mut writer = std::io::BufWriter::new(file);
            write_csv(&mut writer, &cfg, &out, &observables)?;
            Some(path.display().to_string())
        }
        None => None,
    };
    let report = build_report(&cfg, &out, &opts, args.common.t_end, csv_path);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable report")
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct CoordDiff {
    max_abs: f64,
    final_abs: f64,
}

#[derive(Debug, Serialize)]
struct PairReport {
    a: String,
    b: String,
    per_coordinate: BTreeMap<String, CoordDiff>,
    max_abs_overall: f64,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    scenario: String,
    t_end: f64,
    samples: usize,
    methods: Vec<String>,
    pairs: Vec<PairReport>,
}

fn cmd_compare(args: &CompareArgs) -> crate::Result<i32> {
    let cfg = load_scenario(&args.common.scenario)?;
    let opts = build_opts(&args.common)?;
    let methods: Vec<RunMethod> = args
        .methods
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<crate::Result<_>>()?;
    if methods.len() < 2 {
        return Err(Error::InvalidSystem(
            "compare needs at least two methods".into(),
        ));
    }

    // independent runs; each owns its state, joined before reporting
    let runs: Vec<crate::Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = methods
            .iter()
            .map(|m| {
                let cfg = &cfg;
                let opts = &opts;
                let t_end = args.common.t_end;
                let m = *m;
                scope.spawn(move || run(cfg, m, t_end, opts))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("no panic")).collect()
    });
    let runs: Vec<RunOutput> = runs.into_iter().collect::<crate::Result<_>>()?;

    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            let mut per_coordinate = BTreeMap::new();
            let mut overall: f64 = 0.0;
            for (c, cname) in cfg.spec.coords().iter().enumerate() {
                let mut max_abs: f64 = 0.0;
                for s in 0..a.len() {
                    max_abs = max_abs.max((a.q(s)[c] - b.q(s)[c]).abs());
                }
                let last = a.len() - 1;
                let final_abs = (a.q(last)[c] - b.q(last)[c]).abs();
                overall = overall.max(max_abs);
                per_coordinate.insert(cname.clone(), CoordDiff { max_abs, final_abs });
            }
            pairs.push(PairReport {
                a: a.method.to_string(),
                b: b.method.to_string(),
                per_coordinate,
                max_abs_overall: overall,
            });
        }
    }
    let report = CompareReport {
        scenario: cfg.spec.name().to_string(),
        t_end: args.common.t_end,
        samples: opts.samples,
        methods: methods.iter().map(|m| m.to_string()).collect(),
        pairs,
    };
    let text = serde_json::to_string_pretty(&report).expect("serializable report");
    if let Some(path) = &args.out {
        std::fs::write(path, &text).map_err(|e| Error::Schema {
            pointer: String::new(),
            detail: format!("cannot write {}: {e}", path.display()),
        })?;
    }
    println!("{text}");
    Ok(0)
}

fn cmd_check(args: &CheckArgs) -> i32 {
    let results = crate::check::run_invariants(&args.filter);
    let mut failures = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {}/{}: {}", r.module, r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    println!(
        "{} of {} invariants passed",
        results.len() - failures,
        results.len()
    );
    if failures > 0 {
        2
    } else {
        0
    }
}

/// Parse argv and dispatch; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Check(args) => return cmd_check(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Expose the CSV header builder for tests.
pub fn csv_header_for(cfg: &ScenarioConfig, observables: &[String]) -> String {
    csv_header(cfg, observables)
}
