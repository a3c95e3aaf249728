//! Atomic probability measures on the real line, one-dimensional
//! Wasserstein-1 geometry, quantization of continuous laws and calibration
//! of a terminal law from call quotes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of a valid measure sum to one within this tolerance.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Largest deviation of the input weight sum from one that construction
/// still accepts (and renormalizes away).
const RENORMALIZE_LIMIT: f64 = 1e-6;

/// Marginal tolerance for transport plans.
const MARGINAL_TOLERANCE: f64 = 1e-10;

/// Tolerance for slope and convexity checks on call quotes.
const QUOTE_TOLERANCE: f64 = 1e-10;

/// A probability measure with finitely many atoms `x_0 < x_1 < ... < x_N`.
///
/// Atoms with zero weight are kept: they index faces of the probability
/// simplex that the solver works on. Atoms are nonnegative unless the
/// measure was built with [`AtomicMeasure::new_signed`].
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    signed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeasureFile {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomicMeasure {
    /// Builds a measure on nonnegative atoms.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::build(atoms, weights, false)
    }

    /// Builds a measure whose atoms may be negative.
    pub fn new_signed(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::build(atoms, weights, true)
    }

    pub fn dirac(x: f64) -> Result<Self> {
        Self::build(vec![x], vec![1.0], x < 0.0)
    }

    fn build(atoms: Vec<f64>, mut weights: Vec<f64>, signed: bool) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        for (i, &x) in atoms.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::InvalidMeasure(format!("atom {i} is not finite")));
            }
            if !signed && x < 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} = {x} is negative (negative support must be allowed explicitly)"
                )));
            }
            if i > 0 && atoms[i - 1] >= x {
                return Err(Error::InvalidMeasure(format!(
                    "atoms not strictly increasing at index {i}"
                )));
            }
        }
        for (i, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() || *w < -WEIGHT_TOLERANCE {
                return Err(Error::InvalidMeasure(format!("weight {i} = {w} is negative")));
            }
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_LIMIT {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { atoms, weights, signed })
    }

    /// Normalizes nonnegative weights without checking their sum. Used for
    /// conditional laws whose sums carry the rounding of a division.
    fn from_unnormalized(atoms: Vec<f64>, weights: Vec<f64>, signed: bool) -> Self {
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w.max(0.0) / total).collect();
        Self { atoms, weights, signed }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn allows_negative(&self) -> bool {
        self.signed
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.weights[i] > 0.0
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_active(i)).collect()
    }

    /// True when all mass sits on a single atom.
    pub fn is_singleton(&self) -> bool {
        self.active_indices().len() == 1
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }

    /// Smallest and largest atom of the support (inactive atoms included).
    pub fn range(&self) -> (f64, f64) {
        (self.atoms[0], self.atoms[self.len() - 1])
    }

    /// Mass sitting exactly at `x`.
    pub fn weight_at(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .position(|&y| y == x)
            .map_or(0.0, |i| self.weights[i])
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .take_while(|(y, _)| **y <= x)
            .map(|(_, w)| w)
            .sum()
    }

    /// Undiscounted call price `E[(X - K)_+]`.
    pub fn call_price(&self, strike: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x - strike).max(0.0))
            .sum()
    }

    pub fn from_json_str(s: &str, allow_negative: bool) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(s)?;
        Self::build(file.atoms, file.weights, allow_negative)
    }

    pub fn to_json_string(&self) -> String {
        let file = MeasureFile {
            atoms: self.atoms.clone(),
            weights: self.weights.clone(),
        };
        serde_json::to_string_pretty(&file).expect("measure serializes")
    }

    pub fn load(path: impl AsRef<Path>, allow_negative: bool) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?, allow_negative)
    }
}

pub fn mean(m: &AtomicMeasure) -> f64 {
    m.mean()
}

/// A coupling `Γ` between two atomic measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    source: AtomicMeasure,
    target: AtomicMeasure,
    mass: Vec<Vec<f64>>,
}

impl TransportPlan {
    /// Validates nonnegativity and both marginals.
    pub fn new(source: AtomicMeasure, target: AtomicMeasure, mass: Vec<Vec<f64>>) -> Result<Self> {
        let plan = Self { source, target, mass };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.source.len(), self.target.len());
        if self.mass.len() != n || self.mass.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidPlan(format!("mass matrix is not {n}x{m}")));
        }
        for (i, row) in self.mass.iter().enumerate() {
            if row.iter().any(|&g| !(g >= 0.0)) {
                return Err(Error::InvalidPlan(format!("negative mass in row {i}")));
            }
            let s: f64 = row.iter().sum();
            if (s - self.source.weights[i]).abs() > MARGINAL_TOLERANCE {
                return Err(Error::InvalidPlan(format!(
                    "row {i} sums to {s}, source weight is {}",
                    self.source.weights[i]
                )));
            }
        }
        for j in 0..m {
            let s: f64 = self.mass.iter().map(|row| row[j]).sum();
            if (s - self.target.weights[j]).abs() > MARGINAL_TOLERANCE {
                return Err(Error::InvalidPlan(format!(
                    "column {j} sums to {s}, target weight is {}",
                    self.target.weights[j]
                )));
            }
        }
        Ok(())
    }

    /// The product coupling `source ⊗ target`.
    pub fn product(source: &AtomicMeasure, target: &AtomicMeasure) -> Self {
        let mass = source
            .weights
            .iter()
            .map(|a| target.weights.iter().map(|b| a * b).collect())
            .collect();
        Self {
            source: source.clone(),
            target: target.clone(),
            mass,
        }
    }

    pub fn source(&self) -> &AtomicMeasure {
        &self.source
    }

    pub fn target(&self) -> &AtomicMeasure {
        &self.target
    }

    pub fn mass(&self) -> &[Vec<f64>] {
        &self.mass
    }

    pub fn cost(&self) -> f64 {
        let mut c = 0.0;
        for (i, row) in self.mass.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                c += g * (self.source.atoms[i] - self.target.atoms[j]).abs();
            }
        }
        c
    }
}

/// Wasserstein-1 distance together with the monotone (quantile) coupling that
/// attains it.
pub fn wasserstein1(m1: &AtomicMeasure, m2: &AtomicMeasure) -> (f64, TransportPlan) {
    (w1_distance(m1, m2), monotone_plan(m1, m2))
}

/// `∫ |F_1(x) - F_2(x)| dx` by a merge over both supports.
fn w1_distance(m1: &AtomicMeasure, m2: &AtomicMeasure) -> f64 {
    let (a, b) = (&m1.atoms, &m2.atoms);
    let (mut i, mut j) = (0, 0);
    let (mut f1, mut f2) = (0.0_f64, 0.0_f64);
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (f1 - f2).abs() * (x - p);
        }
        while i < a.len() && a[i] == x {
            f1 += m1.weights[i];
            i += 1;
        }
        while j < b.len() && b[j] == x {
            f2 += m2.weights[j];
            j += 1;
        }
        prev = Some(x);
    }
    total
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = c.last_mut() {
        *last = 1.0;
    }
    c
}

fn monotone_plan(m1: &AtomicMeasure, m2: &AtomicMeasure) -> TransportPlan {
    let (c1, c2) = (cumulative(&m1.weights), cumulative(&m2.weights));
    let mut mass = vec![vec![0.0; m2.len()]; m1.len()];
    let (mut i, mut j) = (0, 0);
    while i < m1.len() && j < m2.len() {
        let lo1 = if i == 0 { 0.0 } else { c1[i - 1] };
        let lo2 = if j == 0 { 0.0 } else { c2[j - 1] };
        let overlap = c1[i].min(c2[j]) - lo1.max(lo2);
        if overlap > 0.0 {
            mass[i][j] = overlap;
        }
        if c1[i] < c2[j] {
            i += 1;
        } else if c2[j] < c1[i] {
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    TransportPlan {
        source: m1.clone(),
        target: m2.clone(),
        mass,
    }
}

/// One row of a disintegrated plan: the conditional law of the target given a
/// source atom.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub measure: AtomicMeasure,
    /// The source atom carries no mass; `measure` is an arbitrary fixed
    /// singleton on the first target atom.
    pub degenerate: bool,
}

/// Conditional laws `m(x_i, dy) = Γ_{i·} / ξ^i`.
pub fn disintegrate(plan: &TransportPlan) -> Result<Vec<KernelRow>> {
    plan.validate()?;
    let target = &plan.target;
    Ok(plan
        .mass
        .iter()
        .zip(&plan.source.weights)
        .map(|(row, &w)| {
            if w > 0.0 && row.iter().sum::<f64>() > 0.0 {
                KernelRow {
                    measure: AtomicMeasure::from_unnormalized(
                        target.atoms.clone(),
                        row.clone(),
                        target.signed,
                    ),
                    degenerate: false,
                }
            } else {
                let mut weights = vec![0.0; target.len()];
                weights[0] = 1.0;
                KernelRow {
                    measure: AtomicMeasure {
                        atoms: target.atoms.clone(),
                        weights,
                        signed: target.signed,
                    },
                    degenerate: true,
                }
            }
        })
        .collect())
}

/// Mixes kernel rows by the source weights: `Σ_i ξ^i m(x_i, ·)`.
pub fn recompose(source: &AtomicMeasure, kernel: &[KernelRow]) -> Result<AtomicMeasure> {
    if kernel.len() != source.len() {
        return Err(Error::InvalidPlan("kernel rows do not match source atoms".into()));
    }
    let atoms = kernel[0].measure.atoms.clone();
    let mut weights = vec![0.0; atoms.len()];
    for (row, &w) in kernel.iter().zip(&source.weights) {
        if row.measure.atoms != atoms {
            return Err(Error::InvalidPlan("kernel rows live on different supports".into()));
        }
        for (acc, v) in weights.iter_mut().zip(&row.measure.weights) {
            *acc += w * v;
        }
    }
    AtomicMeasure::build(atoms, weights, kernel[0].measure.signed)
}

/// Bound on `|U(t, m1, a) - U(t, m2, a)|` from the Lipschitz constant of the
/// payoff and the remaining horizon.
pub fn value_modulus(
    m1: &AtomicMeasure,
    m2: &AtomicMeasure,
    lipschitz: f64,
    horizon_remaining: f64,
) -> f64 {
    lipschitz * horizon_remaining * w1_distance(m1, m2)
}

/// A continuous law on `[0, ∞)` given through its CDF.
pub trait ContinuousLaw {
    fn cdf(&self, x: f64) -> f64;

    /// Expected value; may be infinite.
    fn mean(&self) -> f64;

    /// Smallest `x` with `cdf(x) >= u`, by bisection unless overridden.
    fn quantile(&self, u: f64) -> f64 {
        let mut hi = 1.0;
        while self.cdf(hi) < u {
            hi *= 2.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        if self.cdf(lo) >= u {
            return lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= u {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformLaw {
    pub lo: f64,
    pub hi: f64,
}

impl ContinuousLaw for UniformLaw {
    fn cdf(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn quantile(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }
}

/// Step CDF at a single point.
#[derive(Debug, Clone, Copy)]
pub struct PointMassLaw(pub f64);

impl ContinuousLaw for PointMassLaw {
    fn cdf(&self, x: f64) -> f64 {
        if x >= self.0 {
            1.0
        } else {
            0.0
        }
    }

    fn mean(&self) -> f64 {
        self.0
    }

    fn quantile(&self, _u: f64) -> f64 {
        self.0
    }
}

/// Lognormal law of `exp(mu + sigma Z)`.
#[derive(Debug, Clone)]
pub struct LogNormalLaw(statrs::distribution::LogNormal);

impl LogNormalLaw {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        statrs::distribution::LogNormal::new(mu, sigma)
            .map(Self)
            .map_err(|e| Error::InvalidMeasure(e.to_string()))
    }
}

impl ContinuousLaw for LogNormalLaw {
    fn cdf(&self, x: f64) -> f64 {
        statrs::distribution::ContinuousCDF::cdf(&self.0, x)
    }

    fn mean(&self) -> f64 {
        statrs::statistics::Distribution::mean(&self.0).unwrap_or(f64::INFINITY)
    }

    fn quantile(&self, u: f64) -> f64 {
        statrs::distribution::ContinuousCDF::inverse_cdf(&self.0, u)
    }
}

/// Pareto law with the given scale and tail index; the mean is infinite for
/// `shape <= 1`.
#[derive(Debug, Clone, Copy)]
pub struct ParetoLaw {
    pub scale: f64,
    pub shape: f64,
}

impl ContinuousLaw for ParetoLaw {
    fn cdf(&self, x: f64) -> f64 {
        if x < self.scale {
            0.0
        } else {
            1.0 - (self.scale / x).powf(self.shape)
        }
    }

    fn mean(&self) -> f64 {
        if self.shape <= 1.0 {
            f64::INFINITY
        } else {
            self.shape * self.scale / (self.shape - 1.0)
        }
    }

    fn quantile(&self, u: f64) -> f64 {
        self.scale * (1.0 - u).powf(-1.0 / self.shape)
    }
}

/// Equal-weight quantization at the quantile midpoints `q((k + ½) / n)`.
///
/// With `mean_correct` the atoms are rescaled (or shifted, when they are all
/// zero) so that the atomic mean equals the mean of the law.
pub fn quantize(law: &dyn ContinuousLaw, n_atoms: usize, mean_correct: bool) -> Result<AtomicMeasure> {
    if n_atoms == 0 {
        return Err(Error::InvalidMeasure("need at least one atom".into()));
    }
    let target_mean = law.mean();
    if !target_mean.is_finite() {
        return Err(Error::InvalidMeasure("law has infinite mean".into()));
    }
    let mut atoms: Vec<f64> = Vec::with_capacity(n_atoms);
    let mut weights: Vec<f64> = Vec::with_capacity(n_atoms);
    let w = 1.0 / n_atoms as f64;
    for k in 0..n_atoms {
        let x = law.quantile((k as f64 + 0.5) / n_atoms as f64);
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidMeasure(format!(
                "quantile {x} outside [0, inf); the law must live on the half-line"
            )));
        }
        match atoms.last() {
            Some(&last) if x <= last => *weights.last_mut().unwrap() += w,
            _ => {
                atoms.push(x);
                weights.push(w);
            }
        }
    }
    if mean_correct {
        let m: f64 = atoms.iter().zip(&weights).map(|(x, w)| x * w).sum();
        if m > 0.0 {
            let scale = target_mean / m;
            atoms.iter_mut().for_each(|x| *x *= scale);
        } else {
            atoms.iter_mut().for_each(|x| *x += target_mean);
        }
    }
    AtomicMeasure::new(atoms, weights)
}

/// Undiscounted call prices quoted at increasing nonnegative strikes.
#[derive(Debug, Clone, PartialEq)]
pub struct CallQuoteCurve {
    strikes: Vec<f64>,
    prices: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuoteRow {
    strike: f64,
    price: f64,
}

impl CallQuoteCurve {
    /// Checks monotonicity, slope bounds and convexity; failures report the
    /// index of the offending quote.
    pub fn new(strikes: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        let bad = |index: usize, reason: &str| Error::InvalidQuotes {
            index,
            reason: reason.to_string(),
        };
        if strikes.len() != prices.len() {
            return Err(bad(0, "strike and price counts differ"));
        }
        if strikes.len() < 2 {
            return Err(bad(0, "need at least two quotes"));
        }
        for i in 0..strikes.len() {
            if !strikes[i].is_finite() || strikes[i] < 0.0 {
                return Err(bad(i, "strike must be finite and nonnegative"));
            }
            if !prices[i].is_finite() || prices[i] < 0.0 {
                return Err(bad(i, "price must be finite and nonnegative"));
            }
            if i > 0 && strikes[i] <= strikes[i - 1] {
                return Err(bad(i, "strikes must be strictly increasing"));
            }
        }
        let slopes = slopes(&strikes, &prices);
        for (i, &d) in slopes.iter().enumerate() {
            if d > QUOTE_TOLERANCE {
                return Err(bad(i + 1, "price increases with strike"));
            }
            if d < -1.0 - QUOTE_TOLERANCE {
                return Err(bad(i + 1, "price falls faster than the strike rises"));
            }
            if i > 0 && d - slopes[i - 1] < -QUOTE_TOLERANCE {
                return Err(bad(i, "prices are not convex in strike"));
            }
        }
        Ok(Self { strikes, prices })
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        for row in rdr.deserialize() {
            let row: QuoteRow = row?;
            strikes.push(row.strike);
            prices.push(row.price);
        }
        Self::new(strikes, prices)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (&strike, &price) in self.strikes.iter().zip(&self.prices) {
            w.serialize(QuoteRow { strike, price }).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf8 csv")
    }
}

fn slopes(strikes: &[f64], prices: &[f64]) -> Vec<f64> {
    strikes
        .windows(2)
        .zip(prices.windows(2))
        .map(|(k, c)| (c[1] - c[0]) / (k[1] - k[0]))
        .collect()
}

/// Call prices of `m` at the given strikes.
pub fn price_calls(m: &AtomicMeasure, strikes: &[f64]) -> Result<CallQuoteCurve> {
    CallQuoteCurve::new(
        strikes.to_vec(),
        strikes.iter().map(|&k| m.call_price(k)).collect(),
    )
}

/// Discrete Breeden–Litzenberger inversion.
///
/// Interior strikes receive the jump in the price slope; the first strike
/// (which must be 0) receives `1 + slope_0`. The remaining mass sits at the
/// last strike when the last quote is zero; otherwise it is placed at the
/// conditional mean of the tail, the only location consistent with the
/// last quote.
pub fn calibrate_from_calls(curve: &CallQuoteCurve) -> Result<AtomicMeasure> {
    let (k, c) = (&curve.strikes, &curve.prices);
    if k[0] != 0.0 {
        return Err(Error::InvalidQuotes {
            index: 0,
            reason: "first quote must be at strike 0 (it fixes the mean)".into(),
        });
    }
    let d = slopes(k, c);
    let n = k.len();
    let mut atoms = k.clone();
    let mut weights = vec![0.0; n];
    weights[0] = 1.0 + d[0];
    for i in 1..n - 1 {
        weights[i] = d[i] - d[i - 1];
    }
    let tail = -d[n - 2];
    let last = c[n - 1];
    if last > QUOTE_TOLERANCE {
        if tail <= 0.0 {
            return Err(Error::InvalidQuotes {
                index: n - 1,
                reason: "positive last price with flat slope has no finite-mean inversion".into(),
            });
        }
        atoms.push(k[n - 1] + last / tail);
        weights.push(tail);
    } else {
        weights[n - 1] = tail;
    }
    for w in weights.iter_mut() {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    AtomicMeasure::new(atoms, weights)
}
