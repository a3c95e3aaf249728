//! `asian-bound`: batch front end for calibration, pricing, closed-form
//! oracles, Monte Carlo and surface export.
//!
//! Exit codes: 0 on success, 1 when a `compare` reconciliation fails, 2 on
//! usage or input errors.

mod compare;
mod instance;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use asian_bound::hjb::{extract_policy_for, split_targets};
use asian_bound::measures::calibrate_from_calls;
use asian_bound::oracle::{classify_region, spread_drift_residual, spread_value};
use asian_bound::simulate::{check_mvm_properties, simulate};
use asian_bound::{solve, CallQuoteCurve, SimConfig, SpreadState};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::instance::{Grid, InstanceArgs, PolicyKind};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "asian-bound", version, about = "Model-independent upper bounds for Asian options")]
struct Cli {
    /// Worker threads for the solver and simulator.
    #[arg(long, global = true, env = "MVM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Recover an atomic terminal law from call quotes.
    Calibrate(CalibrateArgs),
    /// Solve for the upper bound of one instance.
    Price(PriceArgs),
    /// Evaluate the closed-form three-atom call-spread value.
    Oracle(OracleArgs),
    /// Simulate an explicit or random measure-valued martingale.
    Simulate(SimulateArgs),
    /// Export the three-atom call-spread value over the simplex as CSV.
    Surface(SurfaceArgs),
    /// Reconcile solver, oracle and simulator on one instance.
    Compare(compare::CompareArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write the result here (plus `<file>.manifest.json`) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// CSV with header `strike,price`; the first strike must be 0.
    #[arg(long)]
    quotes: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct PriceArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Grid as `n_t,n_a,n_s` (intervals in time, average and simplex edge).
    #[arg(long, default_value = "100,100,100")]
    grid: Grid,
    /// Gap between envelope and waiting value that counts as diffusing.
    #[arg(long, default_value_t = 1e-6)]
    policy_tolerance: f64,
    /// Write the split targets at the origin as a policy file for
    /// `simulate --policy from-surface`.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    a: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    k1: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    k2: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, value_enum)]
    policy: PolicyKind,
    /// Policy file written by `price --policy-out` (for `from-surface`).
    #[arg(long, required_if_eq("policy", "from-surface"))]
    policy_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Artificial-time step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also run the measure-valued martingale property checks.
    #[arg(long)]
    check: bool,
    /// Write checkpoint samples as CSV (`path_id,t,S,A`).
    #[arg(long)]
    dump_paths: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SurfaceSource {
    Solver,
    Oracle,
}

#[derive(Debug, Args)]
struct SurfaceArgs {
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    k1: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    k2: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value = "100,100,100")]
    grid: Grid,
    #[arg(long, value_enum, default_value = "solver")]
    source: SurfaceSource,
    /// Add the closed-form region label as a fourth column.
    #[arg(long)]
    regions: bool,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Calibrate(args) => calibrate(args).map(|_| true),
        Command::Price(args) => price(args).map(|_| true),
        Command::Oracle(args) => oracle(args).map(|_| true),
        Command::Simulate(args) => run_simulate(args).map(|_| true),
        Command::Surface(args) => surface(args).map(|_| true),
        Command::Compare(args) => compare::run(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Prints a JSON document with the manifest embedded, or writes it to
/// `out` with the manifest beside it.
fn emit_json(mut doc: Value, manifest: &RunManifest, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
            manifest.write_beside(path)?;
        }
        None => {
            doc["manifest"] = manifest.to_value();
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}

/// CSV goes to `out` (manifest beside it) or to stdout (manifest to stderr).
fn emit_csv(text: &str, manifest: &RunManifest, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            manifest.write_beside(path)?;
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            eprintln!("{}", serde_json::to_string(&manifest.to_value())?);
        }
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let curve = CallQuoteCurve::load(&args.quotes).with_context(|| format!("loading {}", args.quotes.display()))?;
    let measure = calibrate_from_calls(&curve)?;
    let mut manifest = RunManifest::new("calibrate", json!({ "quotes": args.quotes }));
    manifest.digest(&args.quotes)?;
    let doc: Value = serde_json::from_str(&measure.to_json_string())?;
    emit_json(doc, &manifest, args.output.out.as_deref())
}

fn price(args: PriceArgs) -> Result<()> {
    let inst = args.instance.load()?;
    let cfg = inst.solver_config(args.grid);
    let surface = solve(inst.measure.atoms(), &inst.payoff, &cfg)?;
    let weights = inst.measure.weights();
    let value = surface.value_at_origin(weights)?;
    let targets = split_targets(&surface, weights, args.policy_tolerance)?;
    let (lo, hi) = surface.a_range();
    let origin = ((cfg.a_origin - lo) / (hi - lo) * surface.n_avg() as f64).round() as usize;
    let row = extract_policy_for(&surface, 0, &[origin], args.policy_tolerance)?;

    let mut manifest = RunManifest::new(
        "price",
        json!({ "solver": cfg, "policy_tolerance": args.policy_tolerance, "payoff": inst.payoff.to_spec() }),
    );
    inst.digest_into(&mut manifest)?;
    if let Some(path) = &args.policy_out {
        let policy = json!({ "support": inst.measure.atoms(), "weights": weights, "targets": targets });
        std::fs::write(path, serde_json::to_string_pretty(&policy)?).with_context(|| format!("writing {}", path.display()))?;
        manifest.write_beside(path)?;
    }
    let doc = json!({
        "value": value,
        "tolerance": surface.tolerance(),
        "grid": { "n_time": cfg.n_time, "n_avg": cfg.n_avg, "n_simplex": cfg.n_simplex },
        "warnings": surface.warnings(),
        "policy": {
            "diffuse_nodes": row.count_diffuse(),
            "wait_nodes": row.count_wait(),
            "split_targets": targets,
        },
    });
    emit_json(doc, &manifest, args.output.out.as_deref())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let s = SpreadState::new(args.t, args.a, args.beta, args.gamma, args.k1, args.k2, args.horizon)?;
    let value = spread_value(&s);
    let (region, residual) = if s.t >= s.horizon {
        (Value::Null, Value::Null)
    } else {
        let residual = spread_drift_residual(&s).ok().map_or(Value::Null, |r| json!(r));
        (json!(classify_region(&s).as_str()), residual)
    };
    let manifest = RunManifest::new("oracle", serde_json::to_value(s)?);
    emit_json(
        json!({ "value": value, "region": region, "drift_residual": residual }),
        &manifest,
        None,
    )
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let inst = args.instance.load()?;
    let policy = inst.policy(args.policy, args.policy_file.as_deref(), args.seed)?;
    let mut cfg = SimConfig::new(args.paths, args.dt, args.seed, inst.horizon);
    cfg.weight = inst.weight.clone();
    let ensemble = simulate(&inst.measure, policy.as_ref(), &inst.payoff, &cfg)?;

    let mut manifest = RunManifest::new(
        "simulate",
        json!({ "simulation": cfg, "policy": policy.name(), "payoff": inst.payoff.to_spec() }),
    )
    .with_seed(args.seed);
    inst.digest_into(&mut manifest)?;
    if let Some(path) = &args.policy_file {
        manifest.digest(path)?;
    }
    if let Some(path) = &args.dump_paths {
        emit_csv(&ensemble.to_csv_string(), &manifest, Some(path))?;
    }
    let mut doc = json!({ "policy": policy.name(), "summary": ensemble.summary() });
    if args.check {
        doc["checks"] = serde_json::to_value(check_mvm_properties(&ensemble, &inst.measure))?;
    }
    emit_json(doc, &manifest, args.output.out.as_deref())
}

fn surface(args: SurfaceArgs) -> Result<()> {
    let (k1, k2, horizon) = (args.k1, args.k2, args.horizon);
    // Validates the strikes against the closed form's box up front.
    SpreadState::new(0.0, 0.0, 0.0, 0.0, k1, k2, horizon)?;
    let payoff = asian_bound::Payoff::call_spread(k1, k2)?;
    let mut cfg = args.grid.config(horizon);
    cfg.allow_negative = true;
    cfg.origin_cone = true;
    let solved = match args.source {
        SurfaceSource::Solver => Some(solve(&[-1.0, 0.0, 1.0], &payoff, &cfg)?),
        SurfaceSource::Oracle => None,
    };
    let n = cfg.n_simplex;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["beta", "gamma", "value"];
    if args.regions {
        header.push("region");
    }
    w.write_record(&header)?;
    for i in 0..=n {
        for j in 0..=n - i {
            let (beta, gamma) = (i as f64 / n as f64, j as f64 / n as f64);
            let weights = [(n - i - j) as f64 / n as f64, beta, gamma];
            let state = SpreadState::new(0.0, 0.0, beta, gamma, k1, k2, horizon)?;
            let value = match &solved {
                Some(s) => s.value_at_origin(&weights)?,
                None => spread_value(&state),
            };
            let mut record = vec![beta.to_string(), gamma.to_string(), value.to_string()];
            if args.regions {
                record.push(classify_region(&state).as_str().to_string());
            }
            w.write_record(&record)?;
        }
    }
    let text = String::from_utf8(w.into_inner()?)?;
    let manifest = RunManifest::new(
        "surface",
        json!({ "k1": k1, "k2": k2, "solver": cfg, "source": format!("{:?}", args.source).to_lowercase(), "regions": args.regions }),
    );
    emit_csv(&text, &manifest, args.output.out.as_deref())
}
