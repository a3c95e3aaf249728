use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use asian_bound::simulate::{convex_optimal_policy, spread_optimal_policy, RandomPolicy, SplitPolicy};
use asian_bound::{AtomicMeasure, ControlPolicy, Payoff, PayoffSpec, SolverConfig, TimeWeight};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::manifest::RunManifest;

/// `n_t,n_a,n_s`, or a single `n` for all three.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub n_time: usize,
    pub n_avg: usize,
    pub n_simplex: u32,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| p.parse::<usize>().map_err(|e| format!("bad grid count {p:?}: {e}"));
        let (t, a, n) = match parts.as_slice() {
            [n] => (parse(n)?, parse(n)?, parse(n)?),
            [t, a, n] => (parse(t)?, parse(a)?, parse(n)?),
            _ => return Err(format!("grid must be n or n_t,n_a,n_s, got {s:?}")),
        };
        if t < 2 || a < 2 || n < 2 {
            return Err("grid counts must be at least 2".into());
        }
        Ok(Self {
            n_time: t,
            n_avg: a,
            n_simplex: n as u32,
        })
    }
}

impl Grid {
    pub fn config(&self, horizon: f64) -> SolverConfig {
        SolverConfig::new(self.n_time, self.n_avg, self.n_simplex, horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Convex,
    Spread,
    Random,
    FromSurface,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    /// Terminal law as JSON `{"atoms": [...], "weights": [...]}`.
    #[arg(long)]
    pub measure: Option<PathBuf>,
    /// Payoff as JSON `{"kind": "call" | "call_spread" | "piecewise", ...}`.
    #[arg(long)]
    pub payoff: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Time weight of the average as JSON `{"times": [...], "values": [...]}`.
    #[arg(long)]
    pub weight: Option<PathBuf>,
    /// Accept negative atoms.
    #[arg(long)]
    pub allow_negative: bool,
}

pub struct Instance {
    pub measure: AtomicMeasure,
    pub payoff: Payoff,
    pub horizon: f64,
    pub weight: TimeWeight,
    files: Vec<PathBuf>,
}

impl InstanceArgs {
    pub fn load(&self) -> Result<Instance> {
        let measure_path = self.measure.as_ref().ok_or_else(|| anyhow!("--measure is required"))?;
        let payoff_path = self.payoff.as_ref().ok_or_else(|| anyhow!("--payoff is required"))?;
        let measure = AtomicMeasure::load(measure_path, self.allow_negative)
            .with_context(|| format!("loading {}", measure_path.display()))?;
        let payoff = Payoff::load(payoff_path).with_context(|| format!("loading {}", payoff_path.display()))?;
        let mut files = vec![measure_path.clone(), payoff_path.clone()];
        let weight = match &self.weight {
            Some(p) => {
                files.push(p.clone());
                TimeWeight::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => TimeWeight::Constant,
        };
        if !(self.horizon > 0.0) {
            bail!("--horizon must be positive");
        }
        Ok(Instance {
            measure,
            payoff,
            horizon: self.horizon,
            weight,
            files,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.measure.is_none() && self.payoff.is_none()
    }
}

#[derive(Deserialize)]
struct PolicyFile {
    targets: Vec<Vec<f64>>,
}

impl Instance {
    /// The three-atom call-spread instance with `K1 = -0.1`, `K2 = 0.5`,
    /// `T = 1` and weights `(1/4, 1/4, 1/2)` on `{-1, 0, 1}`.
    pub fn reference() -> Self {
        Self {
            measure: AtomicMeasure::new_signed(vec![-1.0, 0.0, 1.0], vec![0.25, 0.25, 0.5]).expect("valid measure"),
            payoff: Payoff::call_spread(-0.1, 0.5).expect("valid payoff"),
            horizon: 1.0,
            weight: TimeWeight::Constant,
            files: Vec::new(),
        }
    }

    pub fn solver_config(&self, grid: Grid) -> SolverConfig {
        let mut cfg = grid.config(self.horizon).with_weight(self.weight.clone()).restricted_to_origin();
        cfg.allow_negative = self.measure.allows_negative();
        cfg
    }

    pub fn digest_into(&self, manifest: &mut RunManifest) -> Result<()> {
        self.files.iter().try_for_each(|p| manifest.digest(p))
    }

    /// `(beta, gamma, K1, K2)` when the instance is the three-atom call
    /// spread covered by the closed form.
    pub fn spread_params(&self) -> Option<(f64, f64, f64, f64)> {
        let PayoffSpec::CallSpread { k1, k2 } = self.payoff.to_spec() else {
            return None;
        };
        let ok = self.measure.atoms() == [-1.0, 0.0, 1.0]
            && self.weight == TimeWeight::Constant
            && k1 > -1.0
            && k1 < 1.0
            && k2 > 0.0;
        let w = self.measure.weights();
        ok.then(|| (w[1], w[2], k1, k2))
    }

    pub fn policy(&self, kind: PolicyKind, file: Option<&Path>, seed: u64) -> Result<Box<dyn ControlPolicy>> {
        let k = self.measure.len();
        Ok(match kind {
            PolicyKind::Convex => Box::new(convex_optimal_policy(k)),
            PolicyKind::Spread => {
                let (b, g, k1, k2) = self
                    .spread_params()
                    .ok_or_else(|| anyhow!("the spread policy needs support {{-1, 0, 1}}, a call-spread payoff and a constant weight"))?;
                Box::new(spread_optimal_policy(b, g, k1, k2, self.horizon)?)
            }
            PolicyKind::Random => Box::new(RandomPolicy::from_seed(seed, k, 4)),
            PolicyKind::FromSurface => {
                let path = file.ok_or_else(|| anyhow!("--policy-file is required for from-surface"))?;
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let parsed: PolicyFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                if parsed.targets.iter().any(|t| t.len() != k) {
                    bail!("policy targets do not match the {k}-atom support");
                }
                Box::new(SplitPolicy::new(parsed.targets, "from-surface")?)
            }
        })
    }
}
