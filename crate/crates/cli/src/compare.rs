use anyhow::Result;
use asian_bound::hjb::split_targets;
use asian_bound::oracle::{convex_value, spread_value, two_atom_value};
use asian_bound::simulate::{convex_optimal_policy, simulate, spread_optimal_policy, SplitPolicy};
use asian_bound::{solve, ControlPolicy, PayoffSpec, SimConfig, SpreadState, TimeWeight};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::instance::{Grid, Instance, InstanceArgs};
use crate::manifest::RunManifest;
use crate::{emit_json, OutputArgs};

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Without --measure and --payoff the three-atom call-spread reference
    /// instance is used.
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, default_value = "100,100,100")]
    grid: Grid,
    /// Solver acceptance tolerance; defaults to the scheme's own.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print the table as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Serialize)]
struct Row {
    check: String,
    left: f64,
    right: f64,
    difference: f64,
    tolerance: f64,
    passed: bool,
}

impl Row {
    fn new(check: impl Into<String>, left: f64, right: f64, tolerance: f64) -> Self {
        let difference = (left - right).abs();
        Self {
            check: check.into(),
            left,
            right,
            difference,
            tolerance,
            passed: difference <= tolerance,
        }
    }
}

/// Closed-form value at the origin when one applies, with its name.
fn oracle_value(inst: &Instance) -> Option<(&'static str, f64)> {
    let (m, p, t) = (&inst.measure, &inst.payoff, inst.horizon);
    if inst.weight != TimeWeight::Constant {
        return None;
    }
    if let Some((b, g, k1, k2)) = inst.spread_params() {
        let s = SpreadState::new(0.0, 0.0, b, g, k1, k2, t).ok()?;
        return Some(("call-spread oracle", spread_value(&s)));
    }
    if m.atoms() == [-1.0, 1.0] && p.to_spec() == (PayoffSpec::CallSpread { k1: 0.0, k2: 0.5 }) {
        return Some(("two-atom oracle", two_atom_value(0.0, 0.0, m.weights()[1], t).ok()?));
    }
    if p.is_convex() {
        return Some(("convex oracle", convex_value(m, 0.0, 0.0, p, t).ok()?));
    }
    None
}

pub fn run(args: CompareArgs) -> Result<bool> {
    let inst = if args.instance.is_empty() {
        Instance::reference()
    } else {
        args.instance.load()?
    };
    let cfg = inst.solver_config(args.grid);
    let surface = solve(inst.measure.atoms(), &inst.payoff, &cfg)?;
    let weights = inst.measure.weights();
    let solver = surface.value_at_origin(weights)?;
    let tolerance = args.tolerance.unwrap_or_else(|| surface.tolerance());
    let oracle = oracle_value(&inst);

    // Simulate the closed-form optimal model where one is known, otherwise
    // the split read off the solved surface.
    let policy: Box<dyn ControlPolicy> = match (inst.spread_params(), inst.payoff.is_convex()) {
        (Some((b, g, k1, k2)), _) => Box::new(spread_optimal_policy(b, g, k1, k2, inst.horizon)?),
        (None, true) => Box::new(convex_optimal_policy(inst.measure.len())),
        (None, false) => Box::new(SplitPolicy::new(split_targets(&surface, weights, 1e-6)?, "from-surface")?),
    };
    let mut sim = SimConfig::new(args.paths, args.dt, args.seed, inst.horizon);
    sim.weight = inst.weight.clone();
    let summary = simulate(&inst.measure, policy.as_ref(), &inst.payoff, &sim)?.summary();
    let (mc, se) = (summary.mean_payoff, summary.std_error);

    let mut rows = Vec::new();
    if let Some((name, v)) = oracle {
        rows.push(Row::new(format!("solver vs {name}"), solver, v, tolerance));
        rows.push(Row::new(format!("Monte Carlo ({}) vs {name}", policy.name()), mc, v, 3.0 * se));
    }
    rows.push(Row::new(format!("Monte Carlo ({}) vs solver", policy.name()), mc, solver, 3.0 * se + tolerance));
    let expected_average = inst.weight.integral(0.0, inst.horizon) * inst.measure.mean();
    rows.push(Row::new(
        "Monte Carlo mean of A_T vs expected average",
        summary.mean_a_t,
        expected_average,
        (3.0 * summary.a_t_std_error).max(1e-12),
    ));
    let all_passed = rows.iter().all(|r| r.passed);

    let mut manifest = RunManifest::new(
        "compare",
        json!({ "solver": cfg, "simulation": sim, "tolerance": tolerance, "payoff": inst.payoff.to_spec(), "weights": weights }),
    )
    .with_seed(args.seed);
    inst.digest_into(&mut manifest)?;

    if args.json || args.output.out.is_some() {
        let doc = json!({ "passed": all_passed, "solver": solver, "oracle": oracle.map(|o| o.1), "monte_carlo": summary, "rows": rows });
        emit_json(doc, &manifest, args.output.out.as_deref())?;
    } else {
        println!("{:<52} {:>12} {:>12} {:>10} {:>10}  status", "check", "left", "right", "diff", "tolerance");
        for r in &rows {
            println!(
                "{:<52} {:>12.6} {:>12.6} {:>10.2e} {:>10.2e}  {}",
                r.check,
                r.left,
                r.right,
                r.difference,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
    }
    for r in rows.iter().filter(|r| !r.passed) {
        eprintln!(
            "reconciliation failed: {}: |{} - {}| = {:.3e} > {:.3e}",
            r.check, r.left, r.right, r.difference, r.tolerance
        );
    }
    Ok(all_passed)
}
