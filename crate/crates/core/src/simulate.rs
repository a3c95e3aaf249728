//! Monte Carlo simulation of controlled measure-valued martingales on a
//! finite support.
//!
//! The state is the weight vector `ξ` over the support together with the
//! real clock `t`, the running average `a` and the artificial clock `r`.
//! A control `(λ, w)` advances real time at rate `λ` and diffuses `ξ` along
//! `w`. Diffusion uses bounded two-point increments rather than Gaussian
//! ones, so `ξ` stays a martingale exactly and stops land on their targets
//! without projection.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::barycentric;
use crate::measures::{wasserstein1, AtomicMeasure};
use crate::oracle::{spread_split_targets, SpreadState};
use crate::payoffs::{Payoff, TimeWeight};

const SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvmState {
    pub weights: Vec<f64>,
    pub t: f64,
    pub a: f64,
    pub r: f64,
}

impl MvmState {
    pub fn new(weights: Vec<f64>, a: f64) -> Self {
        Self {
            weights,
            t: 0.0,
            a,
            r: 0.0,
        }
    }

    /// True when all mass sits on one atom.
    pub fn is_singular(&self) -> bool {
        self.weights.iter().any(|&w| w == 1.0)
    }

    pub fn absorbed(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w == 0.0 || w == 1.0).collect()
    }

    /// Index of the atom carrying all mass, if any.
    pub fn terminal_atom(&self) -> Option<usize> {
        self.weights.iter().position(|&w| w == 1.0)
    }
}

/// `λ` is the real-time rate; `w` sums to zero and diffuses the weights.
/// `reach` optionally caps the displacement `c` in `ξ + c w` to
/// `[-reach.0, reach.1]`, which lets a policy stop diffusion inside the
/// simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub lambda: f64,
    pub w: Vec<f64>,
    pub reach: Option<(f64, f64)>,
}

impl Control {
    pub fn wait(k: usize) -> Self {
        Self {
            lambda: 1.0,
            w: vec![0.0; k],
            reach: None,
        }
    }

    pub fn is_wait(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0)
    }

    /// `‖w‖² + λ` with the norm over the chart coordinates `1..=k`.
    pub fn normalization(&self) -> f64 {
        self.w.iter().skip(1).map(|v| v * v).sum::<f64>() + self.lambda
    }
}

/// Support, horizon and time weight shared by all paths.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub support: Vec<f64>,
    pub horizon: f64,
    pub weight: TimeWeight,
}

impl Dynamics {
    pub fn new(support: Vec<f64>, horizon: f64) -> Self {
        Self {
            support,
            horizon,
            weight: TimeWeight::Constant,
        }
    }

    pub fn mean(&self, weights: &[f64]) -> f64 {
        weights.iter().zip(&self.support).map(|(w, x)| w * x).sum()
    }

    pub fn is_terminated(&self, s: &MvmState) -> bool {
        s.is_singular() && s.t >= self.horizon
    }

    /// `Y = A + (∫_t^T f) S`, a martingale under every control.
    pub fn y_value(&self, s: &MvmState) -> f64 {
        s.a + self.weight.integral(s.t.min(self.horizon), self.horizon) * self.mean(&s.weights)
    }

    fn check_control(&self, s: &MvmState, c: &Control) -> Result<()> {
        let k = self.support.len();
        if c.w.len() != k || s.weights.len() != k {
            return Err(Error::InvalidControl(format!("direction has {} entries, support {k}", c.w.len())));
        }
        if !(0.0..=1.0).contains(&c.lambda) {
            return Err(Error::InvalidControl(format!("lambda = {}", c.lambda)));
        }
        if c.w.iter().sum::<f64>().abs() > 1e-9 {
            return Err(Error::InvalidControl("direction does not conserve mass".into()));
        }
        for (n, (&x, &v)) in s.weights.iter().zip(&c.w).enumerate() {
            if (x == 0.0 || x == 1.0) && v != 0.0 {
                return Err(Error::InvalidControl(format!("direction moves absorbed atom {n}")));
            }
        }
        // A point mass has nothing to diffuse, so any rate is a valid no-op
        // or hold there.
        if !s.is_singular() && (c.normalization() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidControl(format!(
                "|w|^2 + lambda = {}, expected 1",
                c.normalization()
            )));
        }
        Ok(())
    }

    /// One step of artificial length `dt_r`. Real time advances by
    /// `λ dt_r` (clamped at the horizon) with the average accruing the
    /// pre-step mean. The weights move by `+u w` or `-v w` with
    /// probabilities that keep the mean: `u = v = √dt_r` away from stops,
    /// shortened to the distance to the nearest stop otherwise. The normal
    /// draw `noise` picks the branch through its cumulative probability.
    pub fn step(&self, s: &MvmState, c: &Control, dt_r: f64, noise: f64) -> Result<MvmState> {
        if !(dt_r > 0.0) {
            return Err(Error::InvalidConfig(format!("dt_r = {dt_r}")));
        }
        self.check_control(s, c)?;
        let mut next = s.clone();
        next.r += dt_r;
        let t1 = (s.t + c.lambda * dt_r).min(self.horizon).max(s.t);
        if t1 > s.t {
            next.a += self.mean(&s.weights) * self.weight.integral(s.t, t1);
            next.t = t1;
        }
        if c.is_wait() {
            return Ok(next);
        }
        let (mut up, mut down) = (f64::INFINITY, f64::INFINITY);
        for (&x, &v) in s.weights.iter().zip(&c.w) {
            if v > 0.0 {
                up = up.min((1.0 - x) / v);
                down = down.min(x / v);
            } else if v < 0.0 {
                up = up.min(x / -v);
                down = down.min((1.0 - x) / -v);
            }
        }
        if let Some((lo, hi)) = c.reach {
            up = up.min(hi);
            down = down.min(lo);
        }
        let h = dt_r.sqrt();
        let (u, v) = (up.min(h), down.min(h));
        let disp = if u + v <= 0.0 {
            0.0
        } else if u == v {
            if noise >= 0.0 {
                u
            } else {
                -v
            }
        } else {
            let p_up = v / (u + v);
            if normal_cdf(noise) < p_up {
                u
            } else {
                -v
            }
        };
        for (x, &dw) in next.weights.iter_mut().zip(&c.w) {
            *x += disp * dw;
        }
        renormalize(&mut next.weights);
        Ok(next)
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Clears roundoff: tiny weights become 0, near-one weights 1, and the
/// surviving block is rescaled to sum to one.
fn renormalize(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < SNAP {
            *x = 0.0;
        }
    }
    if let Some(i) = w.iter().position(|&x| x > 1.0 - SNAP) {
        w.fill(0.0);
        w[i] = 1.0;
        return;
    }
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
}

/// A feedback rule for the control. Called only on unterminated states.
pub trait ControlPolicy: Sync {
    fn control(&self, state: &MvmState, dynamics: &Dynamics) -> Control;

    fn name(&self) -> String {
        "policy".into()
    }
}

/// Diffuses at time zero so that the weights end on one of `targets`, with
/// probabilities given by the barycentric coordinates of the start; waits
/// there until maturity and then diffuses to the support's vertices.
///
/// Each diffusion leg moves along `ξ - ν_j` for the first target `ν_j`
/// still carrying barycentric weight, stopping either at `ν_j` or where
/// that weight vanishes.
#[derive(Debug, Clone)]
pub struct SplitPolicy {
    targets: Vec<Vec<f64>>,
    name: String,
}

impl SplitPolicy {
    pub fn new(targets: Vec<Vec<f64>>, name: impl Into<String>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidControl("no split targets".into()));
        }
        let k = targets[0].len();
        for t in &targets {
            if t.len() != k || t.iter().any(|&x| !(x >= -SNAP)) || (t.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidControl(format!("target {t:?} is not a law on the support")));
            }
        }
        Ok(Self {
            targets,
            name: name.into(),
        })
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    /// Barycentric coordinates of `start` over the targets, if it lies in
    /// their hull.
    pub fn split_probabilities(&self, start: &[f64]) -> Option<Vec<f64>> {
        let lam = barycentric(&self.targets, start)?;
        lam.iter().all(|&l| l >= -1e-9).then_some(lam)
    }
}

fn vertices(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            e
        })
        .collect()
}

/// One diffusion leg of a split toward `targets`, or `None` when the
/// weights already sit on a target (or outside the hull).
fn split_leg(targets: &[Vec<f64>], xi: &[f64]) -> Option<Control> {
    let lam = barycentric(targets, xi)?;
    if lam.iter().any(|&l| l < -1e-9) || lam.iter().any(|&l| l >= 1.0 - 1e-9) {
        return None;
    }
    let j = lam.iter().position(|&l| l > 1e-12)?;
    let d: Vec<f64> = xi.iter().zip(&targets[j]).map(|(x, v)| x - v).collect();
    let norm = d.iter().skip(1).map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let mut w: Vec<f64> = d.iter().map(|v| v / norm).collect();
    // Absorbed coordinates carry no direction; clear roundoff there.
    for (wi, &x) in w.iter_mut().zip(xi) {
        if x == 0.0 || x == 1.0 {
            *wi = 0.0;
        }
    }
    let fix: f64 = w.iter().sum();
    if let Some(i) = (0..w.len()).find(|&i| xi[i] > 0.0 && xi[i] < 1.0) {
        w[i] -= fix;
    }
    let lj = lam[j];
    Some(Control {
        lambda: 0.0,
        w,
        reach: Some((norm, norm * lj / (1.0 - lj))),
    })
}

fn terminal_leg(state: &MvmState) -> Control {
    split_leg(&vertices(state.weights.len()), &state.weights).unwrap_or_else(|| Control::wait(state.weights.len()))
}

impl ControlPolicy for SplitPolicy {
    fn control(&self, state: &MvmState, dynamics: &Dynamics) -> Control {
        if state.t >= dynamics.horizon {
            return terminal_leg(state);
        }
        if state.t > 0.0 {
            return Control::wait(state.weights.len());
        }
        split_leg(&self.targets, &state.weights).unwrap_or_else(|| Control::wait(state.weights.len()))
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// The optimal model for convex payoffs: split to point masses at once,
/// then hold.
pub fn convex_optimal_policy(support_len: usize) -> SplitPolicy {
    SplitPolicy {
        targets: vertices(support_len),
        name: "convex".into(),
    }
}

/// The optimal model for the call spread on `{-1, 0, 1}` started from
/// weights `(1 - β - γ, β, γ)` at `t = a = 0`.
pub fn spread_optimal_policy(beta: f64, gamma: f64, k1: f64, k2: f64, horizon: f64) -> Result<SplitPolicy> {
    let s = SpreadState::new(0.0, 0.0, beta, gamma, k1, k2, horizon)?;
    let targets = spread_split_targets(&s).into_iter().map(|t| t.to_vec()).collect();
    SplitPolicy::new(targets, "spread")
}

/// Holds the measure until maturity.
pub fn wait_policy(m: &AtomicMeasure) -> SplitPolicy {
    SplitPolicy {
        targets: vec![m.weights().to_vec()],
        name: "wait".into(),
    }
}

/// Piecewise-constant random controls: on each of a few real-time buckets
/// a rate `λ ∈ [0.1, 1]` and a vertex to diffuse toward or away from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomPolicy {
    pub buckets: Vec<(f64, usize)>,
}

impl RandomPolicy {
    pub fn from_seed(seed: u64, support_len: usize, n_buckets: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buckets = (0..n_buckets.max(1))
            .map(|_| (rng.random_range(0.1..=1.0), rng.random_range(0..support_len)))
            .collect();
        Self { buckets }
    }
}

impl ControlPolicy for RandomPolicy {
    fn control(&self, state: &MvmState, dynamics: &Dynamics) -> Control {
        let k = state.weights.len();
        if state.t >= dynamics.horizon {
            return terminal_leg(state);
        }
        let nb = self.buckets.len();
        let b = ((state.t / dynamics.horizon * nb as f64) as usize).min(nb - 1);
        let (lambda, vertex) = self.buckets[b];
        let active = (0..k)
            .map(|i| (vertex + i) % k)
            .find(|&i| state.weights[i] > 0.0 && state.weights[i] < 1.0);
        let (Some(v), false) = (active, lambda >= 1.0) else {
            return Control::wait(k);
        };
        let mut d: Vec<f64> = state.weights.clone();
        d[v] -= 1.0;
        let norm = d.iter().skip(1).map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Control::wait(k);
        }
        let scale = (1.0 - lambda).sqrt() / norm;
        let mut w: Vec<f64> = d.iter().map(|x| x * scale).collect();
        let fix: f64 = w.iter().sum();
        w[v] -= fix;
        // Rescale so the normalization holds after the mass fix.
        let n2: f64 = w.iter().skip(1).map(|x| x * x).sum();
        if n2 > 0.0 {
            let s = ((1.0 - lambda) / n2).sqrt();
            w.iter_mut().for_each(|x| *x *= s);
        }
        Control {
            lambda,
            w,
            reach: None,
        }
    }

    fn name(&self) -> String {
        "random".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt_r: f64,
    pub seed: u64,
    pub horizon: f64,
    #[serde(default)]
    pub weight: TimeWeight,
    #[serde(default)]
    pub a0: f64,
    /// Real-time checkpoints `c T / n` for `c = 1..=n`, besides the start.
    pub checkpoints: usize,
    /// Artificial-time budget; `None` means `50 / dt_r` steps.
    pub step_budget: Option<usize>,
}

impl SimConfig {
    pub fn new(n_paths: usize, dt_r: f64, seed: u64, horizon: f64) -> Self {
        Self {
            n_paths,
            dt_r,
            seed,
            horizon,
            weight: TimeWeight::Constant,
            a0: 0.0,
            checkpoints: 4,
            step_budget: None,
        }
    }

    pub fn budget(&self) -> usize {
        self.step_budget.unwrap_or((50.0 / self.dt_r).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub terminal_atom: Option<usize>,
    pub a_t: f64,
    pub payoff: f64,
    pub flagged: bool,
    pub steps: usize,
    /// States at the start and at each real-time checkpoint (first step
    /// reaching it; the last one is the terminal state).
    pub checkpoints: Vec<MvmState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub seed: u64,
    pub support: Vec<f64>,
    pub horizon: f64,
    pub weight: TimeWeight,
    pub checkpoint_times: Vec<f64>,
    pub paths: Vec<PathResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub n_used: usize,
    pub flagged: usize,
    pub seed: u64,
    pub mean_payoff: f64,
    pub std_error: f64,
    pub mean_a_t: f64,
    pub a_t_std_error: f64,
}

fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 1);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), n)
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn used(&self) -> impl Iterator<Item = &PathResult> + Clone {
        self.paths.iter().filter(|p| !p.flagged)
    }

    pub fn summary(&self) -> EnsembleSummary {
        let (mean_payoff, std_error, n_used) = mean_se(self.used().map(|p| p.payoff));
        let (mean_a_t, a_t_std_error, _) = mean_se(self.used().map(|p| p.a_t));
        EnsembleSummary {
            n_paths: self.paths.len(),
            n_used,
            flagged: self.paths.len() - n_used,
            seed: self.seed,
            mean_payoff,
            std_error,
            mean_a_t,
            a_t_std_error,
        }
    }

    /// `path_id,t,S,A` rows at every checkpoint.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("path_id,t,S,A\n");
        for (i, p) in self.paths.iter().enumerate() {
            for c in &p.checkpoints {
                let s: f64 = c.weights.iter().zip(&self.support).map(|(w, x)| w * x).sum();
                out.push_str(&format!("{i},{},{},{}\n", c.t, s, c.a));
            }
        }
        out
    }
}

/// Runs `cfg.n_paths` independent paths from `m` under `policy`. Path `i`
/// draws from its own stream of a ChaCha generator seeded with `cfg.seed`,
/// so results do not depend on scheduling.
pub fn simulate(m: &AtomicMeasure, policy: &dyn ControlPolicy, p: &Payoff, cfg: &SimConfig) -> Result<PathEnsemble> {
    if cfg.n_paths == 0 || !(cfg.dt_r > 0.0) || !(cfg.horizon > 0.0) || cfg.checkpoints == 0 {
        return Err(Error::InvalidConfig("simulation needs paths, dt_r > 0, T > 0 and a checkpoint".into()));
    }
    let dynamics = Dynamics {
        support: m.atoms().to_vec(),
        horizon: cfg.horizon,
        weight: cfg.weight.clone(),
    };
    let times: Vec<f64> = (1..=cfg.checkpoints)
        .map(|c| cfg.horizon * c as f64 / cfg.checkpoints as f64)
        .collect();
    let budget = cfg.budget();
    let paths = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            run_path(m, policy, p, &dynamics, &times, cfg.dt_r, cfg.a0, budget, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        seed: cfg.seed,
        support: m.atoms().to_vec(),
        horizon: cfg.horizon,
        weight: cfg.weight.clone(),
        checkpoint_times: times,
        paths,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    m: &AtomicMeasure,
    policy: &dyn ControlPolicy,
    p: &Payoff,
    dynamics: &Dynamics,
    times: &[f64],
    dt_r: f64,
    a0: f64,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PathResult> {
    let horizon = dynamics.horizon;
    let mut state = MvmState::new(m.weights().to_vec(), a0);
    renormalize(&mut state.weights);
    let mut checkpoints = vec![state.clone()];
    let mut next = 0;
    let mut steps = 0;
    let mut flagged = false;
    loop {
        while next < times.len() {
            let last = next + 1 == times.len();
            let reached = if last {
                dynamics.is_terminated(&state)
            } else {
                state.t >= times[next]
            };
            if !reached {
                break;
            }
            checkpoints.push(state.clone());
            next += 1;
        }
        if dynamics.is_terminated(&state) {
            break;
        }
        if steps >= budget {
            flagged = true;
            break;
        }
        let control = policy.control(&state, dynamics);
        if control.is_wait() && control.lambda > 0.0 && state.t < horizon {
            // Deterministic hold: jump straight to the next checkpoint or
            // maturity, charging the budget for the skipped steps.
            let stop = times
                .iter()
                .copied()
                .find(|&tc| tc > state.t)
                .unwrap_or(horizon)
                .min(horizon);
            let dt = stop - state.t;
            let skipped = (dt / (control.lambda * dt_r)).ceil() as usize;
            state.a += dynamics.mean(&state.weights) * dynamics.weight.integral(state.t, stop);
            state.r += dt / control.lambda;
            state.t = stop;
            steps += skipped.max(1);
            continue;
        }
        let noise: f64 = rng.sample(StandardNormal);
        state = dynamics.step(&state, &control, dt_r, noise)?;
        steps += 1;
    }
    Ok(PathResult {
        terminal_atom: state.terminal_atom(),
        a_t: state.a,
        payoff: p.eval(state.a),
        flagged,
        steps,
        checkpoints,
    })
}

/// Outcome of one statistical check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    /// Worst standardized deviation or raw statistic, per check.
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvmReport {
    pub weight_martingale: CheckResult,
    pub terminal_law: CheckResult,
    pub y_martingale: CheckResult,
    pub termination: CheckResult,
}

impl MvmReport {
    pub fn passed(&self) -> bool {
        self.weight_martingale.passed && self.terminal_law.passed && self.y_martingale.passed && self.termination.passed
    }
}

/// Largest `|mean - target| / SE` over checkpoints; exact agreement is
/// required where the sample has no spread.
fn z_score(values: &[f64], target: f64) -> f64 {
    let (mean, se, n) = mean_se(values.iter().copied());
    if n == 0 {
        return f64::INFINITY;
    }
    let dev = (mean - target).abs();
    let tol = 1e-12 * (1.0 + target.abs());
    if dev <= tol {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        dev / se
    }
}

/// Statistical checks that the ensemble behaves like a terminating
/// measure-valued martingale embedding `m`.
pub fn check_mvm_properties(ensemble: &PathEnsemble, m: &AtomicMeasure) -> MvmReport {
    let used: Vec<&PathResult> = ensemble.used().collect();
    let n = used.len();
    let k = m.len();
    let n_cp = used.iter().map(|p| p.checkpoints.len()).min().unwrap_or(0);
    let dynamics = Dynamics {
        support: ensemble.support.clone(),
        horizon: ensemble.horizon,
        weight: ensemble.weight.clone(),
    };

    let mut worst = (0.0_f64, String::new());
    for c in 0..n_cp {
        for atom in 0..k {
            let xs: Vec<f64> = used.iter().map(|p| p.checkpoints[c].weights[atom]).collect();
            let z = z_score(&xs, m.weights()[atom]);
            if z > worst.0 || worst.1.is_empty() {
                worst = (z, format!("checkpoint {c}, atom {atom}"));
            }
        }
    }
    let weight_martingale = CheckResult {
        passed: n > 0 && worst.0 <= 3.0,
        statistic: worst.0,
        threshold: 3.0,
        detail: format!("worst at {}", worst.1),
    };

    let mut freq = vec![0.0; k];
    for p in &used {
        if let Some(i) = p.terminal_atom {
            freq[i] += 1.0 / n as f64;
        }
    }
    let (lo, hi) = m.range();
    let threshold = 3.0 / (n.max(1) as f64).sqrt() * (hi - lo);
    let terminal_law = match AtomicMeasure::new_signed(m.atoms().to_vec(), freq) {
        Ok(empirical) => {
            let (d, _) = wasserstein1(&empirical, m);
            CheckResult {
                passed: d <= threshold,
                statistic: d,
                threshold,
                detail: "W1 between terminal atoms and the target law".into(),
            }
        }
        Err(e) => CheckResult {
            passed: false,
            statistic: f64::INFINITY,
            threshold,
            detail: format!("no terminal law: {e}"),
        },
    };

    let y0 = dynamics.y_value(&MvmState::new(m.weights().to_vec(), used.first().map_or(0.0, |p| p.checkpoints[0].a)));
    let mut worst_y = (0.0_f64, 0);
    for c in 0..n_cp {
        let ys: Vec<f64> = used.iter().map(|p| dynamics.y_value(&p.checkpoints[c])).collect();
        let z = z_score(&ys, y0);
        if z > worst_y.0 {
            worst_y = (z, c);
        }
    }
    let y_martingale = CheckResult {
        passed: n > 0 && worst_y.0 <= 3.0,
        statistic: worst_y.0,
        threshold: 3.0,
        detail: format!("worst at checkpoint {}; Y_0 = {y0}", worst_y.1),
    };

    let flagged = ensemble.paths.len() - n;
    let frac = flagged as f64 / ensemble.paths.len().max(1) as f64;
    let termination = CheckResult {
        passed: frac < 1e-3,
        statistic: frac,
        threshold: 1e-3,
        detail: format!("{flagged} of {} paths hit the step budget", ensemble.paths.len()),
    };

    MvmReport {
        weight_martingale,
        terminal_law,
        y_martingale,
        termination,
    }
}

/// Recombining binomial tree: `values[d][i]` is the price after `i` up
/// moves out of `d`, reached up with probability `up_probs[d][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinomialTree {
    pub values: Vec<Vec<f64>>,
    pub up_probs: Vec<Vec<f64>>,
}

/// One path through the tree with the conditional terminal law at each
/// depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPath {
    /// Node index (number of up moves) at each depth.
    pub nodes: Vec<usize>,
    pub probability: f64,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMvm {
    pub support: Vec<f64>,
    pub paths: Vec<WeightPath>,
}

const MAX_TREE_DEPTH: usize = 20;

/// Conditional terminal laws along every path of a martingale tree.
pub fn mvm_from_tree(tree: &BinomialTree) -> Result<TreeMvm> {
    let depth = tree.values.len().checked_sub(1).ok_or_else(|| Error::InvalidTree("empty tree".into()))?;
    if depth > MAX_TREE_DEPTH {
        return Err(Error::InvalidTree(format!("depth {depth} exceeds {MAX_TREE_DEPTH}")));
    }
    for (d, level) in tree.values.iter().enumerate() {
        if level.len() != d + 1 || level.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTree(format!("level {d} must hold {} finite values", d + 1)));
        }
    }
    if tree.up_probs.len() != depth {
        return Err(Error::InvalidTree(format!("need {depth} levels of probabilities")));
    }
    for (d, level) in tree.up_probs.iter().enumerate() {
        if level.len() != d + 1 || level.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidTree(format!("level {d} probabilities must be {} values in [0, 1]", d + 1)));
        }
        for (i, &p) in level.iter().enumerate() {
            let v = tree.values[d][i];
            let child_mean = p * tree.values[d + 1][i + 1] + (1.0 - p) * tree.values[d + 1][i];
            if (v - child_mean).abs() > 1e-9 * (1.0 + v.abs()) {
                return Err(Error::NonMartingaleTree {
                    depth: d,
                    node: i,
                    value: v,
                    child_mean,
                });
            }
        }
    }
    let mut support: Vec<f64> = tree.values[depth].clone();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let k = support.len();
    let atom = |v: f64| support.iter().position(|&x| x == v).expect("terminal value in support");

    // Conditional terminal laws, backward through the tree.
    let mut laws: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth + 1];
    laws[depth] = tree.values[depth]
        .iter()
        .map(|&v| {
            let mut e = vec![0.0; k];
            e[atom(v)] = 1.0;
            e
        })
        .collect();
    for d in (0..depth).rev() {
        laws[d] = (0..=d)
            .map(|i| {
                let p = tree.up_probs[d][i];
                (0..k)
                    .map(|n| p * laws[d + 1][i + 1][n] + (1.0 - p) * laws[d + 1][i][n])
                    .collect()
            })
            .collect();
    }

    let mut paths = Vec::new();
    for moves in 0..(1u64 << depth) {
        let mut nodes = vec![0usize];
        let mut prob = 1.0;
        for d in 0..depth {
            let i = nodes[d];
            let p = tree.up_probs[d][i];
            if moves >> d & 1 == 1 {
                prob *= p;
                nodes.push(i + 1);
            } else {
                prob *= 1.0 - p;
                nodes.push(i);
            }
        }
        if prob == 0.0 {
            continue;
        }
        let weights = nodes.iter().enumerate().map(|(d, &i)| laws[d][i].clone()).collect();
        paths.push(WeightPath {
            nodes,
            probability: prob,
            weights,
        });
    }
    Ok(TreeMvm { support, paths })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyn2() -> Dynamics {
        Dynamics::new(vec![0.0, 1.0], 1.0)
    }

    #[test]
    fn waiting_step_moves_time_only() {
        let d = Dynamics::new(vec![0.0, 2.0], 1.0);
        let s = MvmState::new(vec![0.5, 0.5], 0.0);
        let n = d.step(&s, &Control::wait(2), 0.1, 0.3).unwrap();
        assert_eq!(n.weights, s.weights);
        assert!((n.t - 0.1).abs() < 1e-15);
        assert!((n.a - 0.1).abs() < 1e-15);
        assert_eq!(n.r, 0.1);
    }

    #[test]
    fn singleton_diffusion_is_noop() {
        let d = dyn2();
        let s = MvmState::new(vec![0.0, 1.0], 0.0);
        let c = Control {
            lambda: 0.0,
            w: vec![0.0, 0.0],
            reach: None,
        };
        let n = d.step(&s, &c, 0.1, 1.0).unwrap();
        assert_eq!(n.weights, s.weights);
        assert_eq!(n.t, 0.0);
    }

    #[test]
    fn rejects_moving_absorbed_atom() {
        let d = Dynamics::new(vec![0.0, 1.0, 2.0], 1.0);
        let s = MvmState::new(vec![0.0, 0.5, 0.5], 0.0);
        let c = Control {
            lambda: 0.0,
            w: vec![0.5, -1.0, 0.5],
            reach: None,
        };
        assert!(matches!(d.step(&s, &c, 0.01, 0.0), Err(Error::InvalidControl(_))));
        let bad_norm = Control {
            lambda: 0.5,
            w: vec![0.0, -1.0, 1.0],
            reach: None,
        };
        assert!(d.step(&s, &bad_norm, 0.01, 0.0).is_err());
    }

    #[test]
    fn boundary_steps_keep_the_mean() {
        // Near the wall the two-point step is (+u, -v) with mean zero.
        let d = dyn2();
        let s = MvmState::new(vec![0.99, 0.01], 0.0);
        let c = Control {
            lambda: 0.0,
            w: vec![-1.0, 1.0],
            reach: None,
        };
        let dt = 0.01;
        let z_split = {
            // p_up = v / (u + v) with u = 0.1, v = 0.01.
            let p_up: f64 = 0.01 / 0.11;
            // Inverse normal cdf by bisection.
            let (mut lo, mut hi) = (-10.0, 10.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if normal_cdf(mid) < p_up {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            lo
        };
        let up = d.step(&s, &c, dt, z_split - 1e-6).unwrap();
        let down = d.step(&s, &c, dt, z_split + 1e-6).unwrap();
        assert!((up.weights[1] - 0.11).abs() < 1e-12);
        assert_eq!(down.weights, vec![1.0, 0.0]);
        let p_up = 0.01 / 0.11;
        let mean = p_up * up.weights[1] + (1.0 - p_up) * down.weights[1];
        assert!((mean - 0.01).abs() < 1e-12);
    }

    #[test]
    fn split_probabilities_and_terminal_law() {
        let m = AtomicMeasure::new(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap();
        let pol = convex_optimal_policy(2);
        assert_eq!(pol.split_probabilities(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        let p = Payoff::call(1.0).unwrap();
        let e = simulate(&m, &pol, &p, &SimConfig::new(4000, 1e-3, 7, 1.0)).unwrap();
        let s = e.summary();
        assert_eq!(s.flagged, 0);
        assert!((s.mean_payoff - 0.5).abs() < 3.0 * s.std_error, "{s:?}");
        assert!(check_mvm_properties(&e, &m).passed());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let m = AtomicMeasure::new(vec![0.0, 1.0, 2.0], vec![0.3, 0.3, 0.4]).unwrap();
        let pol = RandomPolicy::from_seed(3, 3, 4);
        let p = Payoff::call(1.0).unwrap();
        let cfg = SimConfig::new(200, 1e-2, 11, 1.0);
        let a = simulate(&m, &pol, &p, &cfg).unwrap().summary();
        let b = simulate(&m, &pol, &p, &cfg).unwrap().summary();
        assert_eq!(a, b);
    }

    #[test]
    fn wait_from_singleton_has_constant_y() {
        let m = AtomicMeasure::dirac(0.7).unwrap();
        let p = Payoff::call(0.5).unwrap();
        let e = simulate(&m, &wait_policy(&m), &p, &SimConfig::new(10, 1e-2, 1, 2.0)).unwrap();
        let d = Dynamics::new(vec![0.7], 2.0);
        for path in &e.paths {
            for c in &path.checkpoints {
                assert!((d.y_value(c) - 1.4).abs() < 1e-12);
            }
            assert!((path.a_t - 1.4).abs() < 1e-12);
        }
        assert!(check_mvm_properties(&e, &m).passed());
    }

    #[test]
    fn tree_one_step() {
        let tree = BinomialTree {
            values: vec![vec![1.0], vec![0.0, 2.0]],
            up_probs: vec![vec![0.5]],
        };
        let mvm = mvm_from_tree(&tree).unwrap();
        assert_eq!(mvm.support, vec![0.0, 2.0]);
        assert_eq!(mvm.paths.len(), 2);
        for p in &mvm.paths {
            assert_eq!(p.weights[0], vec![0.5, 0.5]);
            assert!(p.weights[1] == vec![1.0, 0.0] || p.weights[1] == vec![0.0, 1.0]);
        }
    }

    #[test]
    fn tree_rejects_non_martingale() {
        let tree = BinomialTree {
            values: vec![vec![1.0], vec![0.0, 3.0]],
            up_probs: vec![vec![0.5]],
        };
        assert!(matches!(
            mvm_from_tree(&tree),
            Err(Error::NonMartingaleTree { depth: 0, node: 0, .. })
        ));
    }

    #[test]
    fn spread_policy_targets_hull() {
        let pol = spread_optimal_policy(0.25, 0.5, -0.1, 0.5, 1.0).unwrap();
        let lam = pol.split_probabilities(&[0.25, 0.25, 0.5]).unwrap();
        assert!((lam.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(spread_optimal_policy(0.25, 0.5, -1.5, 0.5, 1.0).is_err());
    }
}
