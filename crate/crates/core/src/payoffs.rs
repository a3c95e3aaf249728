//! Piecewise-linear payoffs of the running average and time weights for
//! weighted averages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A continuous piecewise-linear function of the running average.
///
/// `slopes[0]` applies left of the first knot and `slopes[m]` right of the
/// last one. Without knots the payoff is affine and `anchor_value` is its
/// value at 0; otherwise it is the value at the first knot.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    knots: Vec<f64>,
    slopes: Vec<f64>,
    knot_values: Vec<f64>,
    anchor: f64,
    anchor_value: f64,
    lipschitz: f64,
    convex: bool,
    bounded: bool,
    nonnegative: bool,
}

impl Payoff {
    /// General constructor: `slopes.len()` must be `knots.len() + 1`.
    pub fn piecewise(knots: Vec<f64>, slopes: Vec<f64>, value_at_first_knot: f64) -> Result<Self> {
        if slopes.len() != knots.len() + 1 {
            return Err(Error::InvalidPayoff(format!(
                "{} knots need {} slopes, got {}",
                knots.len(),
                knots.len() + 1,
                slopes.len()
            )));
        }
        if knots.iter().chain(&slopes).any(|v| !v.is_finite()) || !value_at_first_knot.is_finite() {
            return Err(Error::InvalidPayoff("non-finite parameter".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPayoff("knots must be strictly increasing".into()));
        }
        let anchor = knots.first().copied().unwrap_or(0.0);
        let mut knot_values = Vec::with_capacity(knots.len());
        let mut v = value_at_first_knot;
        for (i, &k) in knots.iter().enumerate() {
            if i > 0 {
                v += slopes[i] * (k - knots[i - 1]);
            }
            knot_values.push(v);
        }
        let lipschitz = slopes.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        let convex = slopes.windows(2).all(|w| w[0] <= w[1]);
        let mut p = Self {
            knots,
            slopes,
            knot_values,
            anchor,
            anchor_value: value_at_first_knot,
            lipschitz,
            convex,
            bounded: false,
            nonnegative: false,
        };
        p.bounded = *p.slopes.last().unwrap() == 0.0;
        p.nonnegative = p.is_nonnegative_on(0.0, f64::INFINITY);
        Ok(p)
    }

    pub fn linear(slope: f64, value_at_zero: f64) -> Result<Self> {
        Self::piecewise(Vec::new(), vec![slope], value_at_zero)
    }

    /// `(a - K)_+`.
    pub fn call(strike: f64) -> Result<Self> {
        Self::piecewise(vec![strike], vec![0.0, 1.0], 0.0)
    }

    /// `(a - K1)_+ - (a - K2)_+`.
    pub fn call_spread(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 < k2) {
            return Err(Error::InvalidPayoff(format!("call spread needs K1 < K2, got {k1} and {k2}")));
        }
        Self::piecewise(vec![k1, k2], vec![0.0, 1.0, 0.0], 0.0)
    }

    #[inline]
    pub fn eval(&self, a: f64) -> f64 {
        let k = &self.knots;
        let s = &self.slopes;
        let m = k.len();
        if m == 0 {
            return self.anchor_value + s[0] * (a - self.anchor);
        }
        // Segment by segment with clamps: branch-free, which matters in the
        // solver's inner loop.
        let mut v = self.anchor_value + s[0] * (if a < k[0] { a } else { k[0] } - k[0]);
        for i in 0..m - 1 {
            let x = if a < k[i] { k[i] } else if a > k[i + 1] { k[i + 1] } else { a };
            v += s[i + 1] * (x - k[i]);
        }
        v + s[m] * (if a > k[m - 1] { a } else { k[m - 1] } - k[m - 1])
    }

    /// Coefficients of `F(x) = c + s x + Σ j_i (x - k_i)_+`, returned as
    /// `(c, s, [(k_i, j_i)])`. Cheaper than [`Payoff::eval`] but loses
    /// precision far from the knots.
    pub fn ramps(&self) -> (f64, f64, Vec<(f64, f64)>) {
        let s0 = self.slopes[0];
        let jumps = self
            .knots
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, self.slopes[i + 1] - self.slopes[i]))
            .collect();
        (self.anchor_value - s0 * self.anchor, s0, jumps)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Largest absolute slope.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.slopes.iter().all(|&s| s >= 0.0)
    }

    /// Bounded on the half-line (the last slope is flat).
    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    /// Nonnegative on `[0, ∞)`.
    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    /// Nonnegativity on `[lo, hi]` (either end may be infinite), checked at
    /// the knots inside and at the limits.
    pub fn is_nonnegative_on(&self, lo: f64, hi: f64) -> bool {
        let m = self.slopes.len() - 1;
        if lo == f64::NEG_INFINITY && self.slopes[0] > 0.0 {
            return false;
        }
        if hi == f64::INFINITY && self.slopes[m] < 0.0 {
            return false;
        }
        let ends = [lo, hi].into_iter().filter(|v| v.is_finite());
        let inner = self.knots.iter().copied().filter(|&k| k >= lo && k <= hi);
        ends.chain(inner).all(|x| self.eval(x) >= 0.0)
    }

    /// Upper bound of the payoff over `[lo, hi]`.
    pub fn max_on(&self, lo: f64, hi: f64) -> f64 {
        let inner = self.knots.iter().copied().filter(|&k| k > lo && k < hi);
        [lo, hi]
            .into_iter()
            .chain(inner)
            .map(|x| self.eval(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn from_spec(spec: &PayoffSpec) -> Result<Self> {
        match *spec {
            PayoffSpec::Call { strike } => Self::call(strike),
            PayoffSpec::CallSpread { k1, k2 } => Self::call_spread(k1, k2),
            PayoffSpec::Piecewise {
                ref knots,
                ref slopes,
                value_at_first_knot,
            } => Self::piecewise(knots.clone(), slopes.clone(), value_at_first_knot),
        }
    }

    /// Named shapes come back as `call` / `call_spread`.
    pub fn to_spec(&self) -> PayoffSpec {
        match (self.knots.as_slice(), self.slopes.as_slice(), self.anchor_value) {
            (&[strike], &[0.0, 1.0], 0.0) => return PayoffSpec::Call { strike },
            (&[k1, k2], &[0.0, 1.0, 0.0], 0.0) => return PayoffSpec::CallSpread { k1, k2 },
            _ => {}
        }
        PayoffSpec::Piecewise {
            knots: self.knots.clone(),
            slopes: self.slopes.clone(),
            value_at_first_knot: self.anchor_value,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: PayoffSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_spec(&spec)
    }
}

/// File format for payoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffSpec {
    Call {
        strike: f64,
    },
    CallSpread {
        k1: f64,
        k2: f64,
    },
    Piecewise {
        knots: Vec<f64>,
        slopes: Vec<f64>,
        value_at_first_knot: f64,
    },
}

/// Weight `f(t)` of a weighted average `A_T = ∫ f(t) S_t dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum TimeWeight {
    #[default]
    Constant,
    /// Linear interpolation between samples; constant beyond the ends.
    Samples { times: Vec<f64>, values: Vec<f64> },
}

impl TimeWeight {
    pub fn samples(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidPayoff("time weight needs matching nonempty samples".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPayoff("time weight samples must be increasing".into()));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPayoff("non-finite time weight sample".into()));
        }
        Ok(TimeWeight::Samples { times, values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match serde_json::from_str(&std::fs::read_to_string(path)?)? {
            TimeWeight::Samples { times, values } => Self::samples(times, values),
            TimeWeight::Constant => Ok(TimeWeight::Constant),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            TimeWeight::Constant => 1.0,
            TimeWeight::Samples { times, values } => {
                let n = times.len();
                if t <= times[0] {
                    return values[0];
                }
                if t >= times[n - 1] {
                    return values[n - 1];
                }
                let i = times.partition_point(|&s| s <= t);
                let (t0, t1) = (times[i - 1], times[i]);
                let u = (t - t0) / (t1 - t0);
                values[i - 1] + u * (values[i] - values[i - 1])
            }
        }
    }

    /// Break points of `f` inside `(t0, t1)`.
    fn breaks(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut pts = vec![t0];
        if let TimeWeight::Samples { times, .. } = self {
            pts.extend(times.iter().copied().filter(|&s| s > t0 && s < t1));
        }
        pts.push(t1);
        pts
    }

    /// `∫_{t0}^{t1} f`, exact for piecewise-linear `f`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match self {
            TimeWeight::Constant => t1 - t0,
            _ => self
                .breaks(t0, t1)
                .windows(2)
                .map(|w| 0.5 * (self.value(w[0]) + self.value(w[1])) * (w[1] - w[0]))
                .sum(),
        }
    }

    /// `(∫ f_+, ∫ f_-)` over `[t0, t1]`, exact for piecewise-linear `f`.
    pub fn split_integral(&self, t0: f64, t1: f64) -> (f64, f64) {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for w in self.breaks(t0, t1).windows(2) {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (self.value(a), self.value(b));
            if fa >= 0.0 && fb >= 0.0 {
                pos += 0.5 * (fa + fb) * (b - a);
            } else if fa <= 0.0 && fb <= 0.0 {
                neg -= 0.5 * (fa + fb) * (b - a);
            } else {
                let c = a + (b - a) * fa / (fa - fb);
                let (l, r) = (0.5 * fa * (c - a), 0.5 * fb * (b - c));
                for part in [l, r] {
                    if part >= 0.0 {
                        pos += part;
                    } else {
                        neg -= part;
                    }
                }
            }
        }
        (pos, neg)
    }
}
