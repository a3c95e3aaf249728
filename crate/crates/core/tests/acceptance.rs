//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails. Progress goes to stderr.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use asian_bound::measures::{calibrate_from_calls, price_calls, wasserstein1};
use asian_bound::oracle::{branch_value, classify_region, spread_drift_residual, spread_value, two_atom_value};
use asian_bound::simulate::{check_mvm_properties, convex_optimal_policy, simulate, spread_optimal_policy, RandomPolicy};
use asian_bound::{solve, AtomicMeasure, Payoff, PathEnsemble, RegionLabel, SimConfig, SolverConfig, SpreadState, ValueSurface};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K1: f64 = -0.1;
const K2: f64 = 0.5;
const SPREAD_SUPPORT: [f64; 3] = [-1.0, 0.0, 1.0];
const SPREAD_WEIGHTS: [f64; 3] = [0.25, 0.25, 0.5];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

/// Uniform point of the triangle `{beta, gamma >= 0, beta + gamma <= 1}`.
fn simplex_point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (u, v): (f64, f64) = (rng.random(), rng.random());
    if u + v > 1.0 {
        (1.0 - u, 1.0 - v)
    } else {
        (u, v)
    }
}

/// Parameters `[t, a, beta, gamma, k1, k2]`; the valid set is convex.
type Params = [f64; 6];

fn random_params(rng: &mut ChaCha8Rng) -> Params {
    let (b, g) = simplex_point(rng);
    let k1: f64 = rng.random_range(-0.95..0.95);
    let k2 = rng.random_range(k1.max(0.0) + 0.02..1.5);
    [rng.random_range(0.0..0.95), rng.random_range(-1.2..1.2), b, g, k1, k2]
}

fn state(p: &Params) -> Option<SpreadState> {
    if p[0] > 0.99 {
        return None;
    }
    SpreadState::new(p[0], p[1], p[2], p[3], p[4], p[5], 1.0).ok()
}

fn lerp(p: &Params, q: &Params, u: f64) -> Params {
    std::array::from_fn(|i| p[i] + u * (q[i] - p[i]))
}

/// Bisects the segment `p -> q` down to a region boundary; returns the two
/// labels on either side and the boundary state.
fn boundary_on(p: &Params, q: &Params) -> Option<(RegionLabel, RegionLabel, SpreadState)> {
    let lp = classify_region(&state(p)?);
    let lq = classify_region(&state(q)?);
    if lp == lq {
        return None;
    }
    let (mut lo, mut hi, mut l_hi) = (0.0, 1.0, lq);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let l = classify_region(&state(&lerp(p, q, mid))?);
        if l == lp {
            lo = mid;
        } else {
            hi = mid;
            l_hi = l;
        }
    }
    Some((lp, l_hi, state(&lerp(p, q, 0.5 * (lo + hi)))?))
}

fn criterion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c01);
    const PER_PAIR: usize = 10_000;

    // Boundary continuity: random segments first, then short segments
    // around known boundary points until every adjacent pair is covered.
    let mut pairs: BTreeMap<(RegionLabel, RegionLabel), (usize, f64, Vec<Params>)> = BTreeMap::new();
    let record = |l1: RegionLabel, l2: RegionLabel, s: SpreadState, pairs: &mut BTreeMap<_, (usize, f64, Vec<Params>)>| {
        let (Some(v1), Some(v2)) = (branch_value(&s, l1), branch_value(&s, l2)) else {
            return;
        };
        let key = if l1 < l2 { (l1, l2) } else { (l2, l1) };
        let e = pairs.entry(key).or_insert((0, 0.0, Vec::new()));
        e.0 += 1;
        e.1 = e.1.max((v1 - v2).abs());
        if e.2.len() < 256 {
            e.2.push([s.t, s.a, s.beta, s.gamma, s.k1, s.k2]);
        }
    };
    for _ in 0..20_000 {
        let (p, q) = (random_params(&mut rng), random_params(&mut rng));
        if let Some((l1, l2, s)) = boundary_on(&p, &q) {
            record(l1, l2, s, &mut pairs);
        }
    }
    let mut attempts = 0usize;
    loop {
        let short: Vec<_> = pairs.iter().filter(|(_, e)| e.0 < PER_PAIR).map(|(k, _)| *k).collect();
        if short.is_empty() || attempts > 5_000_000 {
            break;
        }
        for key in short {
            for _ in 0..200 {
                attempts += 1;
                let seeds = &pairs[&key].2;
                let c = seeds[rng.random_range(0..seeds.len())];
                let d: Params = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
                let p = std::array::from_fn(|i| c[i] - d[i]);
                let q = std::array::from_fn(|i| c[i] + d[i]);
                if let Some((l1, l2, s)) = boundary_on(&p, &q) {
                    record(l1, l2, s, &mut pairs);
                }
            }
        }
    }
    let under: Vec<String> = pairs
        .iter()
        .filter(|(_, e)| e.0 < PER_PAIR)
        .map(|(k, e)| format!("{}|{}:{}", k.0, k.1, e.0))
        .collect();
    let jump = pairs.values().map(|e| e.1).fold(0.0, f64::max);
    progress(&format!("{} adjacent region pairs, largest jump {jump:.2e}", pairs.len()));

    // Drift residual at interior points, checked against a finite
    // difference along the characteristic.
    let (mut residual, mut fd_gap, mut interior) = (f64::NEG_INFINITY, 0.0_f64, 0usize);
    while interior < 10_000 {
        let s = match state(&random_params(&mut rng)) {
            Some(s) => s,
            None => continue,
        };
        let Ok(r) = spread_drift_residual(&s) else { continue };
        interior += 1;
        residual = residual.max(r);
        let h = 1e-6;
        let shifted = |sign: f64| SpreadState {
            t: s.t + sign * h,
            a: s.a + sign * s.drift() * h,
            ..s
        };
        let (up, down) = (shifted(1.0), shifted(-1.0));
        let label = classify_region(&s);
        if down.t >= 0.0 && classify_region(&up) == label && classify_region(&down) == label {
            let fd = (spread_value(&up) - spread_value(&down)) / (2.0 * h);
            fd_gap = fd_gap.max((fd - r).abs());
        }
    }

    // Concavity in (beta, gamma) along random chords.
    let mut concavity = 0.0_f64;
    for _ in 0..10_000 {
        let base = random_params(&mut rng);
        let ((b1, g1), (b2, g2)) = (simplex_point(&mut rng), simplex_point(&mut rng));
        let u: f64 = rng.random();
        let at = |b: f64, g: f64| {
            let mut p = base;
            p[2] = b;
            p[3] = g;
            spread_value(&state(&p).expect("valid state"))
        };
        let mid = at(b1 + u * (b2 - b1), g1 + u * (g2 - g1));
        let chord = at(b1, g1) + u * (at(b2, g2) - at(b1, g1));
        concavity = concavity.max(chord - mid);
    }

    let passed = under.is_empty() && jump <= 1e-9 && residual <= 1e-6 && fd_gap <= 1e-5 && concavity <= 1e-9;
    Outcome::new(
        passed,
        format!(
            "{} pairs x >= {PER_PAIR} points, max jump {jump:.1e}{}; max residual {residual:.1e} (fd agreement {fd_gap:.1e}); concavity defect {concavity:.1e}",
            pairs.len(),
            if under.is_empty() { String::new() } else { format!(", undersampled {}", under.join(" ")) }
        ),
    )
}

fn spread_oracle_at(w: &[f64], k2: f64) -> f64 {
    spread_value(&SpreadState::new(0.0, 0.0, w[1], w[2].min(1.0 - w[1]), K1, k2, 1.0).expect("valid state"))
}

fn max_node_error(surface: &ValueSurface, oracle: impl Fn(&[f64]) -> f64) -> f64 {
    let l = surface.lattice();
    (0..l.len())
        .map(|node| {
            let w = l.weights(node);
            (surface.value_at_origin(&w).expect("origin is solved") - oracle(&w)).abs()
        })
        .fold(0.0, f64::max)
}

fn spread_cfg(n: usize) -> SolverConfig {
    SolverConfig::uniform(n, 1.0).with_negative_support().restricted_to_origin()
}

fn criterion_spread_surface(fine: &ValueSurface) -> Outcome {
    let payoff = Payoff::call_spread(K1, K2).unwrap();
    let mut errors = Vec::new();
    for n in [50, 100] {
        let s = solve(&SPREAD_SUPPORT, &payoff, &spread_cfg(n)).expect("solve");
        errors.push(max_node_error(&s, |w| spread_oracle_at(w, K2)));
    }
    errors.push(max_node_error(fine, |w| spread_oracle_at(w, K2)));
    let center = fine.value_at_origin(&SPREAD_WEIGHTS).unwrap();
    // Below the roundoff floor a doubling only reshuffles last bits.
    let refines = errors.windows(2).all(|e| e[0] <= 1e-12 || e[1] <= 0.7 * e[0]);
    let passed = errors[2] <= 1e-2 && (center - 0.5).abs() <= 1e-2 && refines;
    Outcome::new(
        passed,
        format!(
            "max error at n=50/100/200: {:.2e} / {:.2e} / {:.2e}; V(1/4, 1/2) = {center:.6}",
            errors[0], errors[1], errors[2]
        ),
    )
}

struct ConvexCase {
    support: Vec<f64>,
    payoff: Payoff,
}

fn convex_cases() -> Vec<ConvexCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c03);
    (0..10)
        .map(|_| {
            let mut support = vec![rng.random_range(0.0..0.4)];
            for _ in 0..2 {
                let last = *support.last().unwrap();
                support.push(last + rng.random_range(0.2..0.8));
            }
            let top = support[2];
            let n_knots = rng.random_range(1..=3);
            let mut knots: Vec<f64> = (0..n_knots).map(|_| rng.random_range(0.05 * top..0.95 * top)).collect();
            knots.sort_by(f64::total_cmp);
            knots.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            let mut slopes = vec![rng.random_range(-1.0..0.5)];
            for _ in 0..knots.len() {
                let last = *slopes.last().unwrap();
                slopes.push(last + rng.random_range(0.2..1.5));
            }
            let raw = Payoff::piecewise(knots.clone(), slopes.clone(), 0.0).unwrap();
            let low = [0.0, top].into_iter().chain(knots.iter().copied()).map(|a| raw.eval(a)).fold(f64::INFINITY, f64::min);
            let payoff = Payoff::piecewise(knots, slopes, -low + rng.random_range(0.0..0.2)).unwrap();
            ConvexCase { support, payoff }
        })
        .collect()
}

fn convex_oracle(support: &[f64], payoff: &Payoff, w: &[f64]) -> f64 {
    support.iter().zip(w).map(|(x, p)| p * payoff.eval(*x)).sum()
}

fn criterion_convex(cases: &[ConvexCase]) -> Outcome {
    let (mut worst200, mut worst400) = (0.0_f64, 0.0_f64);
    for (i, c) in cases.iter().enumerate() {
        for n in [200, 400] {
            let start = Instant::now();
            let s = solve(&c.support, &c.payoff, &SolverConfig::uniform(n, 1.0).restricted_to_origin()).expect("solve");
            let e = max_node_error(&s, |w| convex_oracle(&c.support, &c.payoff, w));
            progress(&format!("convex case {i} n={n}: error {e:.2e} ({:.0?})", start.elapsed()));
            if n == 200 {
                worst200 = worst200.max(e);
            } else {
                worst400 = worst400.max(e);
            }
        }
    }
    Outcome::new(
        worst200 <= 1e-2 && worst400 <= 2e-3,
        format!("max error over 10 payoffs: {worst200:.2e} at n=200, {worst400:.2e} at n=400"),
    )
}

fn criterion_two_atom() -> Outcome {
    let payoff = Payoff::call_spread(0.0, 0.5).unwrap();
    let s = solve(&[-1.0, 1.0], &payoff, &spread_cfg(400)).expect("solve");
    let mut worst = 0.0_f64;
    for i in 0..=1000 {
        let g = i as f64 / 1000.0;
        let v = s.value_at_origin(&[1.0 - g, g]).unwrap();
        let exact = (0.5_f64).min(2.0 * g / 3.0);
        debug_assert!((two_atom_value(0.0, 0.0, g, 1.0).unwrap() - exact).abs() < 1e-12);
        worst = worst.max((v - exact).abs());
    }
    Outcome::new(worst <= 5e-3, format!("max error over 1001 values of gamma: {worst:.2e}"))
}

fn within_3se(ens: &PathEnsemble, target: f64) -> (bool, String) {
    let s = ens.summary();
    let dev = (s.mean_payoff - target).abs();
    let ok = dev <= 3.0 * s.std_error || dev <= 1e-12;
    (ok, format!("{:.5} vs {target:.5} (SE {:.1e})", s.mean_payoff, s.std_error))
}

struct McRuns {
    spread: PathEnsemble,
    convex: Vec<(AtomicMeasure, PathEnsemble)>,
    random: Vec<PathEnsemble>,
}

fn criterion_monte_carlo(cases: &[ConvexCase], solver_value: f64, tolerance: f64) -> (Outcome, McRuns) {
    let spread_law = AtomicMeasure::new_signed(SPREAD_SUPPORT.to_vec(), SPREAD_WEIGHTS.to_vec()).unwrap();
    let spread_payoff = Payoff::call_spread(K1, K2).unwrap();
    let policy = spread_optimal_policy(0.25, 0.5, K1, K2, 1.0).unwrap();
    let spread = simulate(&spread_law, &policy, &spread_payoff, &SimConfig::new(100_000, 1e-3, 11, 1.0)).unwrap();
    let (spread_ok, spread_detail) = within_3se(&spread, 0.5);

    // Convex: the two-atom example and three of the randomized cases.
    let mut convex_instances = vec![(
        AtomicMeasure::new(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap(),
        Payoff::call(1.0).unwrap(),
    )];
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c05);
    for c in cases.iter().take(3) {
        let (b, g) = simplex_point(&mut rng);
        let m = AtomicMeasure::new(c.support.clone(), vec![1.0 - b - g, b, g]).unwrap();
        convex_instances.push((m, c.payoff.clone()));
    }
    let mut convex_ok = true;
    let mut convex_details = Vec::new();
    let mut convex = Vec::new();
    for (i, (m, p)) in convex_instances.into_iter().enumerate() {
        let target = convex_oracle(m.atoms(), &p, m.weights());
        let ens = simulate(&m, &convex_optimal_policy(m.len()), &p, &SimConfig::new(50_000, 1e-3, 20 + i as u64, 1.0)).unwrap();
        let (ok, d) = within_3se(&ens, target);
        convex_ok &= ok;
        convex_details.push(d);
        convex.push((m, ens));
    }

    let mut random_ok = true;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut random = Vec::new();
    for i in 0..20u64 {
        let policy = RandomPolicy::from_seed(100 + i, 3, 4);
        let ens = simulate(&spread_law, &policy, &spread_payoff, &SimConfig::new(10_000, 1e-2, 200 + i, 1.0)).unwrap();
        let s = ens.summary();
        worst_excess = worst_excess.max(s.mean_payoff - solver_value - 3.0 * s.std_error);
        random_ok &= s.mean_payoff <= solver_value + 3.0 * s.std_error + tolerance;
        random.push(ens);
    }
    progress(&format!("random policies: largest mean - solver - 3SE = {worst_excess:.3e}"));

    let outcome = Outcome::new(
        spread_ok && convex_ok && random_ok,
        format!(
            "spread {spread_detail}; convex {}; 20 random policies within bound (solver {solver_value:.4}, tolerance {tolerance:.3}, worst excess over solver+3SE {worst_excess:.3e})",
            convex_details.join(", ")
        ),
    );
    (outcome, McRuns { spread, convex, random })
}

fn criterion_mvm(runs: &McRuns) -> Outcome {
    let spread_law = AtomicMeasure::new_signed(SPREAD_SUPPORT.to_vec(), SPREAD_WEIGHTS.to_vec()).unwrap();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut check = |name: String, ens: &PathEnsemble, m: &AtomicMeasure| {
        checked += 1;
        let r = check_mvm_properties(ens, m);
        if !r.passed() {
            failures.push(format!(
                "{name}: a={:.2} b={:.2e}/{:.2e} c={:.2} d={:.1e}",
                r.weight_martingale.statistic,
                r.terminal_law.statistic,
                r.terminal_law.threshold,
                r.y_martingale.statistic,
                r.termination.statistic
            ));
        }
    };
    check("spread".into(), &runs.spread, &spread_law);
    for (i, (m, ens)) in runs.convex.iter().enumerate() {
        check(format!("convex {i}"), ens, m);
    }
    for (i, ens) in runs.random.iter().enumerate() {
        check(format!("random {i}"), ens, &spread_law);
    }

    // Negative control: move mass toward the top atom at every later
    // checkpoint of a valid ensemble.
    let mut drifted = runs.random[0].clone();
    for p in &mut drifted.paths {
        for (c, state) in p.checkpoints.iter_mut().enumerate().skip(1) {
            let shift = (0.02 * c as f64).min(state.weights[0]);
            state.weights[0] -= shift;
            state.weights[2] += shift;
        }
    }
    let control = check_mvm_properties(&drifted, &spread_law);
    let control_ok = !control.weight_martingale.passed;

    Outcome::new(
        failures.is_empty() && control_ok,
        format!(
            "{} of {checked} ensembles pass all four checks{}; drifted fixture weight z = {:.1} ({})",
            checked - failures.len(),
            if failures.is_empty() { String::new() } else { format!(" (failing: {})", failures.join("; ")) },
            control.weight_martingale.statistic,
            if control_ok { "rejected" } else { "NOT rejected" }
        ),
    )
}

/// Exact transport LP by successive shortest paths on the bipartite graph.
fn min_cost_transport(xs: &[f64], p: &[f64], ys: &[f64], q: &[f64]) -> f64 {
    let (m, n) = (xs.len(), ys.len());
    let nodes = m + n + 2;
    let (src, sink) = (0, m + n + 1);
    // Edge: (from, to, capacity, cost); edge e ^ 1 is its reverse.
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new();
    let add = |edges: &mut Vec<_>, u: usize, v: usize, cap: f64, cost: f64| {
        edges.push((u, v, cap, cost));
        edges.push((v, u, 0.0, -cost));
    };
    for i in 0..m {
        add(&mut edges, src, 1 + i, p[i], 0.0);
        for j in 0..n {
            add(&mut edges, 1 + i, 1 + m + j, f64::INFINITY, (xs[i] - ys[j]).abs());
        }
    }
    for j in 0..n {
        add(&mut edges, 1 + m + j, sink, q[j], 0.0);
    }
    let mut total = 0.0;
    for _ in 0..1000 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for (e, &(u, v, cap, cost)) in edges.iter().enumerate() {
                if cap > 1e-15 && dist[u] + cost < dist[v] - 1e-15 {
                    dist[v] = dist[u] + cost;
                    via[v] = e;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != src {
            push = push.min(edges[via[v]].2);
            v = edges[via[v]].0;
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            edges[e].2 -= push;
            edges[e ^ 1].2 += push;
            v = edges[e].0;
        }
        total += push * dist[sink];
    }
    total
}

fn random_measure(rng: &mut ChaCha8Rng, max_atoms: usize, lo: f64, hi: f64) -> AtomicMeasure {
    let k = rng.random_range(1..=max_atoms);
    let mut atoms: Vec<f64> = (0..k).map(|_| rng.random_range(lo..hi)).collect();
    atoms.sort_by(f64::total_cmp);
    atoms.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    let raw: Vec<f64> = atoms.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    AtomicMeasure::new_signed(atoms, weights).unwrap()
}

fn criterion_transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c07);
    let mut lp_gap = 0.0_f64;
    let mut plan_gap = 0.0_f64;
    for _ in 0..200 {
        let (m1, m2) = (random_measure(&mut rng, 5, -2.0, 2.0), random_measure(&mut rng, 5, -2.0, 2.0));
        let (d, plan) = wasserstein1(&m1, &m2);
        let lp = min_cost_transport(m1.atoms(), m1.weights(), m2.atoms(), m2.weights());
        lp_gap = lp_gap.max((d - lp).abs());
        plan_gap = plan_gap.max((plan.cost() - d).abs());
        for (i, row) in plan.mass().iter().enumerate() {
            plan_gap = plan_gap.max((row.iter().sum::<f64>() - m1.weights()[i]).abs());
        }
        for j in 0..m2.len() {
            let col: f64 = plan.mass().iter().map(|r| r[j]).sum();
            plan_gap = plan_gap.max((col - m2.weights()[j]).abs());
        }
    }

    let mut round_trip = 0.0_f64;
    for _ in 0..200 {
        let m = random_measure(&mut rng, 6, 0.05, 5.0);
        let mut strikes = vec![0.0];
        strikes.extend_from_slice(m.atoms());
        for _ in 0..rng.random_range(0..4) {
            strikes.push(rng.random_range(0.01..6.0));
        }
        strikes.sort_by(f64::total_cmp);
        strikes.dedup();
        let back = calibrate_from_calls(&price_calls(&m, &strikes).unwrap()).unwrap();
        for (x, w) in back.atoms().iter().zip(back.weights()) {
            round_trip = round_trip.max((w - m.weight_at(*x)).abs());
        }
        for (x, w) in m.atoms().iter().zip(m.weights()) {
            round_trip = round_trip.max((w - back.weight_at(*x)).abs());
        }
    }

    Outcome::new(
        lp_gap <= 1e-9 && plan_gap <= 1e-9 && round_trip <= 1e-9,
        format!("W1 vs LP {lp_gap:.1e} (plan marginals/cost {plan_gap:.1e}); calibration round trip {round_trip:.1e}"),
    )
}

fn criterion_k2_limit() -> Outcome {
    let call = Payoff::call(K1).unwrap();
    let spread_law = SPREAD_SUPPORT.to_vec();
    let (mut oracle_gaps, mut solver_gaps) = (Vec::new(), Vec::new());
    for k2 in [2.0, 5.0, 20.0] {
        let payoff = Payoff::call_spread(K1, k2).unwrap();
        let s = solve(&SPREAD_SUPPORT, &payoff, &spread_cfg(100)).expect("solve");
        let l = s.lattice();
        let (mut og, mut sg) = (0.0_f64, 0.0_f64);
        for node in 0..l.len() {
            let w = l.weights(node);
            let limit = convex_oracle(&spread_law, &call, &w);
            og = og.max((spread_oracle_at(&w, k2) - limit).abs());
            sg = sg.max((s.value_at_origin(&w).unwrap() - limit).abs());
        }
        oracle_gaps.push(og);
        solver_gaps.push(sg);
    }
    // Gaps already at roundoff may wobble in the last bits.
    let monotone = |g: &[f64]| g.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let passed = monotone(&oracle_gaps)
        && monotone(&solver_gaps)
        && oracle_gaps[2] <= 1e-2
        && solver_gaps[2] <= 1e-2;
    let fmt = |g: &[f64]| g.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(" / ");
    Outcome::new(
        passed,
        format!("gap to call(K1) at K2 = 2/5/20: oracle {}, solver {}", fmt(&oracle_gaps), fmt(&solver_gaps)),
    )
}

fn main() -> ExitCode {
    // `ACCEPTANCE_ONLY=1,7` runs a subset (criterion 6 needs 5's ensembles).
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results: Vec<Outcome> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        eprintln!("criterion {id}: {name}");
        let o = f();
        println!(
            "{} criterion {id} ({name}): {} [{:.1?}]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
        results.push(o);
    };

    if wanted(1) {
        run(1, "oracle self-consistency", &mut criterion_oracle);
    }
    let (mut solver_value, mut tolerance) = (f64::NAN, f64::NAN);
    if wanted(2) || wanted(5) || wanted(6) {
        let fine = solve(&SPREAD_SUPPORT, &Payoff::call_spread(K1, K2).unwrap(), &spread_cfg(200)).expect("solve");
        solver_value = fine.value_at_origin(&SPREAD_WEIGHTS).unwrap();
        tolerance = fine.tolerance();
        if wanted(2) {
            run(2, "three-atom call spread surface", &mut || criterion_spread_surface(&fine));
        }
    }
    let cases = convex_cases();
    if wanted(3) {
        run(3, "convex exactness", &mut || criterion_convex(&cases));
    }
    if wanted(4) {
        run(4, "two-atom call spread", &mut criterion_two_atom);
    }
    if wanted(5) || wanted(6) {
        let mut runs = None;
        run(5, "Monte Carlo reconciliation", &mut || {
            let (o, r) = criterion_monte_carlo(&cases, solver_value, tolerance);
            runs = Some(r);
            o
        });
        let runs = runs.expect("criterion 5 ran");
        if wanted(6) {
            run(6, "MVM property suite", &mut || criterion_mvm(&runs));
        }
    }
    if wanted(7) {
        run(7, "transport and calibration", &mut criterion_transport);
    }
    if wanted(8) {
        run(8, "large-K2 limit", &mut criterion_k2_limit);
    }

    let failed = results.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
