//! Closed-form value functions: the convex payoff case and the seven-region
//! call-spread value on the three-atom support `{-1, 0, 1}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::AtomicMeasure;
use crate::payoffs::Payoff;

/// Slack below which a state counts as lying on a region boundary.
const BOUNDARY_SLACK: f64 = 1e-9;

/// `Σ ξ^i F(a + (T - t) x_i)`: the value for convex payoffs, attained by
/// revealing the terminal atom immediately and then waiting.
pub fn convex_value(m: &AtomicMeasure, t: f64, a: f64, p: &Payoff, horizon: f64) -> Result<f64> {
    if !p.is_convex() {
        return Err(Error::NonConvexPayoff);
    }
    if t > horizon {
        return Err(Error::InvalidState(format!("t = {t} beyond horizon {horizon}")));
    }
    let tau = horizon - t;
    Ok(m.atoms()
        .iter()
        .zip(m.weights())
        .map(|(x, w)| w * p.eval(a + tau * x))
        .sum())
}

/// State of the call-spread problem on the support `{-1, 0, 1}` with
/// weights `(1 - beta - gamma, beta, gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadState {
    pub t: f64,
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k1: f64,
    pub k2: f64,
    pub horizon: f64,
}

impl SpreadState {
    /// Validates the state. Strikes must satisfy `-1 < K1 < 1`, `K2 > 0` and
    /// `K1 < K2`; outside that box the closed form is not claimed.
    pub fn new(t: f64, a: f64, beta: f64, gamma: f64, k1: f64, k2: f64, horizon: f64) -> Result<Self> {
        let s = Self { t, a, beta, gamma, k1, k2, horizon };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let all = [self.t, self.a, self.beta, self.gamma, self.k1, self.k2, self.horizon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite field".into()));
        }
        if self.beta < 0.0 || self.gamma < 0.0 || self.beta + self.gamma > 1.0 + 1e-12 {
            return Err(Error::InvalidState(format!(
                "(beta, gamma) = ({}, {}) outside the simplex",
                self.beta, self.gamma
            )));
        }
        if !(self.horizon > 0.0) || self.t < 0.0 || self.t > self.horizon {
            return Err(Error::InvalidState(format!("t = {} outside [0, {}]", self.t, self.horizon)));
        }
        if !(self.k1 < self.k2) {
            return Err(Error::InvalidState("need K1 < K2".into()));
        }
        if !(self.k1 > -1.0 && self.k1 < 1.0 && self.k2 > 0.0) {
            return Err(Error::InvalidState(format!(
                "strikes ({}, {}) outside the validity box -1 < K1 < 1, K2 > 0",
                self.k1, self.k2
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> [f64; 3] {
        [1.0 - self.beta - self.gamma, self.beta, self.gamma]
    }

    pub fn payoff(&self) -> Payoff {
        Payoff::call_spread(self.k1, self.k2).expect("validated strikes")
    }

    fn tau(&self) -> f64 {
        self.horizon - self.t
    }

    /// Mean of the current law, `2 gamma + beta - 1`.
    pub fn drift(&self) -> f64 {
        2.0 * self.gamma + self.beta - 1.0
    }

    /// Mean of the law conditioned on `{0, 1}`; `K2` by convention when that
    /// edge carries no mass.
    fn s01(&self) -> f64 {
        let m = self.gamma + self.beta;
        if m == 0.0 {
            self.k2
        } else {
            self.gamma / m
        }
    }

    fn levels(&self) -> Levels {
        let tau = self.tau();
        Levels {
            am1: self.a - tau,
            a0: self.a,
            a1: self.a + tau,
            a01: self.a + self.s01() * tau,
            a101: self.a + self.drift() * tau,
        }
    }
}

/// Averages reached by waiting to maturity with each reference law.
struct Levels {
    am1: f64,
    a0: f64,
    a1: f64,
    a01: f64,
    a101: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    I,
    Ii,
    Iii,
    Iv,
    V,
    Vi,
    Vii,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 7] = [
        RegionLabel::I,
        RegionLabel::Ii,
        RegionLabel::Iii,
        RegionLabel::Iv,
        RegionLabel::V,
        RegionLabel::Vi,
        RegionLabel::Vii,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::I => "i",
            RegionLabel::Ii => "ii",
            RegionLabel::Iii => "iii",
            RegionLabel::Iv => "iv",
            RegionLabel::V => "v",
            RegionLabel::Vi => "vi",
            RegionLabel::Vii => "vii",
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One defining inequality `lhs < rhs` (strict) or `lhs <= rhs`.
struct Ineq {
    lhs: f64,
    rhs: f64,
    strict: bool,
}

impl Ineq {
    fn lt(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, strict: true }
    }

    fn le(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, strict: false }
    }

    fn holds(&self) -> bool {
        if self.strict {
            self.lhs < self.rhs
        } else {
            self.lhs <= self.rhs
        }
    }
}

fn region_inequalities(s: &SpreadState, label: RegionLabel) -> Vec<Ineq> {
    let l = s.levels();
    let (k1, k2) = (s.k1, s.k2);
    match label {
        RegionLabel::I => vec![Ineq::le(k2, l.a101)],
        RegionLabel::Ii => vec![Ineq::le(k1, l.am1), Ineq::lt(l.a101, k2)],
        RegionLabel::Iii => vec![Ineq::lt(l.am1, k1), Ineq::lt(l.a101, k2), Ineq::le(k2, l.a01)],
        RegionLabel::Iv => vec![Ineq::lt(l.am1, k1), Ineq::le(k1, l.a0), Ineq::lt(l.a01, k2)],
        RegionLabel::V => vec![Ineq::lt(l.a0, k1), Ineq::lt(l.a01, k2), Ineq::le(k2, l.a1)],
        RegionLabel::Vi => vec![Ineq::lt(l.a0, k1), Ineq::le(k1, l.a1), Ineq::lt(l.a1, k2)],
        RegionLabel::Vii => vec![Ineq::lt(l.a1, k1)],
    }
}

/// The unique region whose defining inequalities hold.
pub fn classify_region(s: &SpreadState) -> RegionLabel {
    let mut found = RegionLabel::ALL
        .into_iter()
        .filter(|&r| region_inequalities(s, r).iter().all(Ineq::holds));
    let label = found
        .next()
        .unwrap_or_else(|| panic!("no region matches state {s:?}"));
    debug_assert!(found.next().is_none(), "several regions match state {s:?}");
    label
}

/// Evaluates the formula of one branch at `s` regardless of which region
/// the state belongs to. `None` when the branch's denominator vanishes.
pub fn branch_value(s: &SpreadState, label: RegionLabel) -> Option<f64> {
    let tau = s.tau();
    let (a, b, g, k1, k2) = (s.a, s.beta, s.gamma, s.k1, s.k2);
    let v = match label {
        RegionLabel::I => k2 - k1,
        RegionLabel::Ii => s.drift() * tau + a - k1,
        RegionLabel::Iii => {
            if tau == 0.0 {
                return None;
            }
            (2.0 * g + b) * (k2 - k1) / (1.0 + (k2 - a) / tau)
        }
        RegionLabel::Iv => g * tau - (g + b) * (k1 - a),
        RegionLabel::V => {
            if k2 == a {
                return None;
            }
            g * tau / (k2 - a) * (k2 - k1)
        }
        RegionLabel::Vi => g * (tau - (k1 - a)),
        RegionLabel::Vii => 0.0,
    };
    Some(v)
}

/// Value of the call spread `(A - K1)_+ - (A - K2)_+` at state `s`.
pub fn spread_value(s: &SpreadState) -> f64 {
    if s.t == s.horizon {
        return s.payoff().eval(s.a);
    }
    let label = classify_region(s);
    branch_value(s, label).expect("denominators are positive inside their regions")
}

/// Closed-form `V_t + (2 gamma + beta - 1) V_a` inside a region.
pub fn spread_drift_residual(s: &SpreadState) -> Result<f64> {
    if s.t >= s.horizon {
        return Err(Error::BoundaryState);
    }
    let label = classify_region(s);
    let scale = 1.0 + s.a.abs() + s.horizon;
    let slack = region_inequalities(s, label)
        .iter()
        .map(|q| q.rhs - q.lhs)
        .fold(f64::INFINITY, f64::min);
    if slack <= BOUNDARY_SLACK * scale {
        return Err(Error::BoundaryState);
    }
    let tau = s.tau();
    let (a, b, g, k1, k2) = (s.a, s.beta, s.gamma, s.k1, s.k2);
    let drift = s.drift();
    Ok(match label {
        RegionLabel::I | RegionLabel::Ii | RegionLabel::Vii => 0.0,
        RegionLabel::Iii => {
            let d = 1.0 + (k2 - a) / tau;
            (k2 - k1) * (2.0 * g + b) / (d * d) * (-(k2 - a) / (tau * tau) + drift / tau)
        }
        RegionLabel::Iv => -g + drift * (g + b),
        RegionLabel::V => -g * (k2 - k1) / ((k2 - a) * (k2 - a)) * (k2 - a - drift * tau),
        RegionLabel::Vi => 2.0 * g * (g + b / 2.0 - 1.0),
    })
}

/// Level `η̄ = gamma ((T - t) / (K2 - a) - 1)` of the split used in region (v).
pub fn eta_bar(s: &SpreadState) -> f64 {
    s.gamma * (s.tau() / (s.k2 - s.a) - 1.0)
}

/// Target laws (as weights over `{-1, 0, 1}`) that the optimal model
/// reaches by diffusing at the current time before waiting to maturity.
/// A single target means the optimal model waits immediately.
pub fn spread_split_targets(s: &SpreadState) -> Vec<[f64; 3]> {
    let w = s.weights();
    if s.t == s.horizon {
        return vec![w];
    }
    let e_m1 = [1.0, 0.0, 0.0];
    let bg = s.beta + s.gamma;
    match classify_region(s) {
        RegionLabel::I | RegionLabel::Ii | RegionLabel::Vii => vec![w],
        RegionLabel::Iii => {
            // Push the mass away from -1 until the mean reaches (K2 - a)/τ.
            let target_mean = (s.k2 - s.a) / s.tau();
            let c = (target_mean + 1.0) / (s.drift() + 1.0);
            let q = [1.0 - c * bg, c * s.beta, c * s.gamma];
            vec![e_m1, q]
        }
        RegionLabel::Iv => {
            if bg == 0.0 {
                return vec![w];
            }
            vec![e_m1, [0.0, s.beta / bg, s.gamma / bg]]
        }
        RegionLabel::V => {
            let eta = eta_bar(s);
            let p1 = eta + s.gamma;
            if p1 <= 0.0 || p1 >= 1.0 {
                return vec![w];
            }
            let xi1 = [0.0, eta / p1, s.gamma / p1];
            let p2 = 1.0 - p1;
            let xi2 = [(1.0 - s.gamma - s.beta) / p2, (s.beta - eta) / p2, 0.0];
            vec![xi1, xi2]
        }
        RegionLabel::Vi => {
            if s.gamma == 0.0 || s.gamma == 1.0 {
                return vec![w];
            }
            let r = 1.0 - s.gamma;
            vec![[0.0, 0.0, 1.0], [w[0] / r, w[1] / r, 0.0]]
        }
    }
}

/// Two-atom case on `{-1, 1}` with strikes `K1 = 0`, `K2 = ½` and weight
/// `gamma` at 1.
pub fn two_atom_value(t: f64, a: f64, gamma: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) || t > horizon || t < 0.0 {
        return Err(Error::InvalidState(format!("gamma = {gamma}, t = {t}, T = {horizon}")));
    }
    if t == horizon {
        return Ok(a.clamp(0.0, 0.5));
    }
    let ratio = (0.5 - a) / (horizon - t);
    Ok(if 2.0 * gamma - 1.0 > ratio {
        0.5
    } else {
        gamma / (1.0 + ratio)
    })
}
