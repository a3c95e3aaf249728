//! Backward semi-Lagrangian solver for the upper price bound.
//!
//! The value `V_α(t, a, ξ)` is computed for every subset `α` of the support,
//! smallest subsets first. On a singleton the terminal atom is known and
//! `V = F(a + x ∫_t^T f)`. On larger subsets each backward time step
//!
//! 1. evaluates the waiting value `W` at every simplex node: the better of
//!    one step along the characteristic `da = f(t) x̄(ξ) dt` (interpolation
//!    in `a`) and waiting with frozen `ξ` all the way to maturity,
//!    `F(a + x̄ ∫_t^T f)`;
//! 2. replaces `W` by its upper concave envelope over the simplex, with the
//!    boundary nodes clamped to the already solved face values.
//!
//! The second candidate in step 1 is an admissible control, so the scheme
//! still produces a monotone lower approximation. It removes the smearing
//! of payoff kinks that pure one-step interpolation suffers on models that
//! freeze the measure right at a kink.
//!
//! Repeated linear interpolation in `a` still diffuses kinks carried by
//! other controls (it overestimates convex data at every step, and the
//! error grows like `Δa^{1/2}` rather than `Δa`). With `subcell` on, each
//! foot is evaluated at the smaller of the cell chord and the larger of the
//! two neighbouring secants extended into the cell. Convex data lies between
//! the two, so a single convex kink in the four-point stencil is recovered
//! exactly; elsewhere this falls back to the chord. The step never exceeds
//! linear interpolation, so the solution stays below the linear scheme's.

pub mod envelope;
pub mod lattice;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::payoffs::{Payoff, TimeWeight};
use envelope::{concave_envelope, EnvelopeWorkspace, Support};
use lattice::{SimplexLattice, MAX_DIM};

/// Default memory budget for stored time rows.
pub const DEFAULT_ROW_BUDGET: usize = 1 << 30;

/// Grid and model parameters of a solve.
///
/// Counts are numbers of intervals: `n_time` steps, `n_avg` cells of the
/// `a` grid and `n_simplex` cells per simplex edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_time: usize,
    pub n_avg: usize,
    pub n_simplex: u32,
    pub horizon: f64,
    #[serde(default)]
    pub weight: TimeWeight,
    /// Acceptance tolerance; `None` means `5 (Δt + Δa + 1/n_simplex)`.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Running average at the start time.
    #[serde(default)]
    pub a_origin: f64,
    /// Explicit `a` range; by default the range reachable from `a_origin`.
    #[serde(default)]
    pub a_range: Option<(f64, f64)>,
    #[serde(default)]
    pub allow_negative: bool,
    /// Include the wait-to-maturity candidate in the waiting step.
    #[serde(default = "default_true")]
    pub wait_to_maturity: bool,
    /// Subcell kink reconstruction in `a` instead of plain linear
    /// interpolation.
    #[serde(default = "default_true")]
    pub subcell: bool,
    #[serde(default = "default_budget")]
    pub row_budget_bytes: usize,
    /// Only solve the `a` cells reachable from `a_origin`; other cells are
    /// left undefined and queries there fail.
    #[serde(default)]
    pub origin_cone: bool,
}

fn default_true() -> bool {
    true
}

fn default_budget() -> usize {
    DEFAULT_ROW_BUDGET
}

impl SolverConfig {
    pub fn new(n_time: usize, n_avg: usize, n_simplex: u32, horizon: f64) -> Self {
        Self {
            n_time,
            n_avg,
            n_simplex,
            horizon,
            weight: TimeWeight::Constant,
            tolerance: None,
            a_origin: 0.0,
            a_range: None,
            allow_negative: false,
            wait_to_maturity: true,
            subcell: true,
            row_budget_bytes: DEFAULT_ROW_BUDGET,
            origin_cone: false,
        }
    }

    pub fn uniform(n: usize, horizon: f64) -> Self {
        Self::new(n, n, n as u32, horizon)
    }

    pub fn with_negative_support(mut self) -> Self {
        self.allow_negative = true;
        self
    }

    pub fn restricted_to_origin(mut self) -> Self {
        self.origin_cone = true;
        self
    }

    /// Plain linear interpolation along characteristics.
    pub fn linear_in_a(mut self) -> Self {
        self.subcell = false;
        self
    }

    pub fn with_weight(mut self, weight: TimeWeight) -> Self {
        self.weight = weight;
        self
    }

    /// Default `a` range: everything reachable from `a_origin` by freezing
    /// any law on the support.
    pub fn resolved_a_range(&self, support: &[f64]) -> (f64, f64) {
        if let Some(r) = self.a_range {
            return r;
        }
        let (x0, xn) = (support[0], support[support.len() - 1]);
        let (pos, neg) = self.weight.split_integral(0.0, self.horizon);
        let lo = self.a_origin + (x0 * pos - xn * neg).min(0.0);
        let mut hi = self.a_origin + (xn * pos - x0 * neg).max(0.0);
        if hi <= lo {
            hi = lo + 1.0;
        }
        (lo, hi)
    }

    fn validate(&self) -> Result<()> {
        if self.n_time < 2 || self.n_avg < 2 || self.n_simplex < 2 {
            return Err(Error::InvalidConfig("grid counts must be at least 2".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if let Some((lo, hi)) = self.a_range {
            if !(lo < hi) {
                return Err(Error::InvalidConfig("empty a range".into()));
            }
        }
        Ok(())
    }
}

/// One subset `α` of the support with its lattice and face links.
#[derive(Debug)]
struct SubsetPlan {
    members: Vec<usize>,
    atoms: Vec<f64>,
    lattice: SimplexLattice,
    xbar: Vec<f64>,
    /// Face subset and face node of each boundary node.
    boundary: Vec<Option<(usize, u32)>>,
}

#[derive(Debug)]
struct SolveData {
    support: Vec<f64>,
    payoff: Payoff,
    config: SolverConfig,
    a_lo: f64,
    da: f64,
    dt: f64,
    subsets: Vec<SubsetPlan>,
    /// Subset index by member bitmask.
    by_mask: BTreeMap<u32, usize>,
    kept: Vec<usize>,
    /// `rows[subset][k]` holds time index `kept[k]`, laid out `[a][node]`.
    rows: Vec<Vec<Vec<f64>>>,
    warnings: Vec<String>,
    /// Solved `a` index range per time index.
    bounds: Vec<(usize, usize)>,
}

/// Solved value grid for one subset of the support. Cheap to clone; faces
/// share the underlying solve.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    data: Arc<SolveData>,
    subset: usize,
}

fn mask_of(members: &[usize]) -> u32 {
    members.iter().fold(0, |m, &i| m | (1 << i))
}

fn build_subsets(support: &[f64], n: u32) -> (Vec<SubsetPlan>, BTreeMap<u32, usize>) {
    let total = support.len();
    let mut masks: Vec<u32> = (1..(1u32 << total)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    let mut plans: Vec<SubsetPlan> = Vec::new();
    let mut by_mask = BTreeMap::new();
    for mask in masks {
        let members: Vec<usize> = (0..total).filter(|i| mask & (1 << i) != 0).collect();
        let dim = members.len() - 1;
        let lattice = SimplexLattice::new(dim, if dim == 0 { 1 } else { n });
        let atoms: Vec<f64> = members.iter().map(|&i| support[i]).collect();
        let mut xbar = Vec::with_capacity(lattice.len());
        let mut boundary = Vec::with_capacity(lattice.len());
        for node in 0..lattice.len() {
            let c = lattice.counts(node);
            let denom = c.iter().sum::<u32>() as f64;
            xbar.push(c.iter().zip(&atoms).map(|(&ci, x)| ci as f64 * x).sum::<f64>() / denom);
            if dim == 0 || lattice.is_interior(node) {
                boundary.push(None);
                continue;
            }
            let face_members: Vec<usize> = (0..=dim).filter(|&p| c[p] > 0).map(|p| members[p]).collect();
            let face_counts: Vec<u32> = c.iter().copied().filter(|&v| v > 0).collect();
            let fidx = by_mask[&mask_of(&face_members)];
            let face: &SubsetPlan = &plans[fidx];
            let fnode = if face.lattice.dim() == 0 {
                0
            } else {
                face.lattice.index_of(&face_counts).expect("face node exists")
            };
            boundary.push(Some((fidx, fnode as u32)));
        }
        by_mask.insert(mask, plans.len());
        plans.push(SubsetPlan {
            members,
            atoms,
            lattice,
            xbar,
            boundary,
        });
    }
    (plans, by_mask)
}

fn kept_rows(n_time: usize, bytes_per_level: usize, budget: usize) -> Vec<usize> {
    if (n_time + 1).saturating_mul(bytes_per_level) <= budget {
        return (0..=n_time).collect();
    }
    let mut stride = 2;
    loop {
        let kept: Vec<usize> = (0..=n_time)
            .filter(|&j| j % stride <= 1 || j == n_time)
            .collect();
        if kept.len().saturating_mul(bytes_per_level) <= budget || stride > n_time {
            return kept;
        }
        stride += 1;
    }
}

/// Solves the value function on `support` (atoms strictly increasing).
pub fn solve(support: &[f64], payoff: &Payoff, cfg: &SolverConfig) -> Result<ValueSurface> {
    cfg.validate()?;
    if support.is_empty() || support.len() > MAX_DIM + 1 {
        return Err(Error::UnsupportedDimension(support.len().saturating_sub(1)));
    }
    if support.windows(2).any(|w| w[0] >= w[1]) || support.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("support must be finite and strictly increasing".into()));
    }
    if !cfg.allow_negative && support[0] < 0.0 {
        return Err(Error::InvalidConfig(
            "negative support atoms require allow_negative".into(),
        ));
    }
    let (a_lo, a_hi) = cfg.resolved_a_range(support);
    if !payoff.is_nonnegative_on(a_lo, a_hi) {
        return Err(Error::InvalidConfig(format!(
            "payoff takes negative values on the a range [{a_lo}, {a_hi}]"
        )));
    }
    let n_a = cfg.n_avg;
    let da = (a_hi - a_lo) / n_a as f64;
    let dt = cfg.horizon / cfg.n_time as f64;
    let mut warnings = Vec::new();
    let inside: Vec<f64> = payoff.knots().iter().copied().filter(|&k| k > a_lo && k < a_hi).collect();
    if let Some(gap) = inside.windows(2).map(|w| w[1] - w[0]).reduce(f64::min) {
        if gap < da {
            warnings.push(format!(
                "a grid spacing {da} does not separate payoff knots {gap} apart"
            ));
        }
    }

    // Solved a-cells per row: everything, or the cells read by some
    // characteristic started near a_origin at time 0. The subcell stencil
    // reads one more cell on each side.
    let mut bounds = vec![(0, n_a); cfg.n_time + 1];
    if cfg.origin_cone {
        let pos = ((cfg.a_origin - a_lo) / da).floor() as isize;
        let (mut lo, mut hi) = (pos - 1, pos + 2);
        let (x0, xn) = (support[0], support[support.len() - 1]);
        let pad = cfg.subcell as isize;
        for j in 0..=cfg.n_time {
            bounds[j] = (lo.clamp(0, n_a as isize) as usize, hi.clamp(0, n_a as isize) as usize);
            if j < cfg.n_time {
                let t1 = if j + 1 == cfg.n_time { cfg.horizon } else { (j + 1) as f64 * dt };
                let i_dt = cfg.weight.integral(j as f64 * dt, t1);
                let (s0, s1) = (x0 * i_dt / da, xn * i_dt / da);
                // Interior nodes shift strictly less than the extreme atoms.
                lo += (s0.min(s1) + 1e-9).floor() as isize - pad;
                hi += (s0.max(s1) - 1e-9).ceil() as isize + pad;
            }
        }
    }
    let (subsets, by_mask) = build_subsets(support, cfg.n_simplex);
    let level_bytes: usize = subsets.iter().map(|s| (n_a + 1) * s.lattice.len() * 8).sum();
    let kept = kept_rows(cfg.n_time, level_bytes, cfg.row_budget_bytes);
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(kept.len()); subsets.len()];

    // Terminal row: V(T, a, ξ) = F(a) at every node.
    let mut prev: Vec<Vec<f64>> = subsets
        .iter()
        .map(|s| {
            let nn = s.lattice.len();
            let mut row = vec![0.0; (n_a + 1) * nn];
            for ia in 0..=n_a {
                let v = payoff.eval(a_lo + ia as f64 * da);
                row[ia * nn..(ia + 1) * nn].fill(v);
            }
            row
        })
        .collect();
    let mut cur: Vec<Vec<f64>> = prev.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut kept_iter = kept.iter().rev().peekable();
    if kept_iter.peek() == Some(&&cfg.n_time) {
        kept_iter.next();
        for (s, row) in prev.iter().enumerate() {
            rows[s].push(row.clone());
        }
    }

    for j in (0..cfg.n_time).rev() {
        let t = j as f64 * dt;
        let t_next = if j + 1 == cfg.n_time { cfg.horizon } else { (j + 1) as f64 * dt };
        let i_dt = cfg.weight.integral(t, t_next);
        let i_t = cfg.weight.integral(t, cfg.horizon);
        for s in 0..subsets.len() {
            let plan = &subsets[s];
            let mut out = std::mem::take(&mut cur[s]);
            if plan.lattice.dim() == 0 {
                let x = plan.atoms[0];
                for (ia, v) in out.iter_mut().enumerate() {
                    *v = payoff.eval(a_lo + ia as f64 * da + x * i_t);
                }
            } else {
                let ctx = StepContext::new(
                    plan,
                    &prev[s],
                    &cur,
                    &subsets,
                    payoff,
                    (a_lo, da, n_a),
                    i_dt,
                    i_t,
                    (cfg.wait_to_maturity, cfg.subcell),
                );
                ctx.run(&mut out, bounds[j]);
            }
            cur[s] = out;
        }
        std::mem::swap(&mut prev, &mut cur);
        if kept_iter.peek() == Some(&&j) {
            kept_iter.next();
            for (s, row) in prev.iter().enumerate() {
                rows[s].push(row.clone());
            }
        }
    }
    // Rows were collected backward in time.
    for r in rows.iter_mut() {
        r.reverse();
    }

    let top = subsets.len() - 1;
    let data = SolveData {
        support: support.to_vec(),
        payoff: payoff.clone(),
        config: cfg.clone(),
        a_lo,
        da,
        dt,
        subsets,
        by_mask,
        kept,
        rows,
        warnings,
        bounds,
    };
    Ok(ValueSurface {
        data: Arc::new(data),
        subset: top,
    })
}

struct StepContext<'a> {
    plan: &'a SubsetPlan,
    prev: &'a [f64],
    faces: &'a [Vec<f64>],
    a_lo: f64,
    da: f64,
    n_a: usize,
    long_step: bool,
    subcell: bool,
    /// Interior nodes with their characteristic over one step, split into
    /// whole `a` cells and a fraction, and their drift to maturity.
    nodes: Vec<usize>,
    cells: Vec<isize>,
    frac: Vec<f64>,
    drift: Vec<f64>,
    ramps: (f64, f64, Vec<(f64, f64)>),
    cell_range: (isize, isize),
    /// Per boundary node: `(node, face subset, face node, face lattice size)`.
    boundary: Vec<(u32, u32, u32, u32)>,
}

impl<'a> StepContext<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        plan: &'a SubsetPlan,
        prev: &'a [f64],
        faces: &'a [Vec<f64>],
        subsets: &[SubsetPlan],
        payoff: &'a Payoff,
        (a_lo, da, n_a): (f64, f64, usize),
        i_dt: f64,
        i_t: f64,
        (long_step, subcell): (bool, bool),
    ) -> Self {
        let mut ctx = Self {
            plan,
            prev,
            faces,
            a_lo,
            da,
            n_a,
            long_step,
            subcell,
            nodes: Vec::new(),
            cells: Vec::new(),
            frac: Vec::new(),
            drift: Vec::new(),
            ramps: payoff.ramps(),
            cell_range: (0, 0),
            boundary: Vec::new(),
        };
        for (node, b) in plan.boundary.iter().enumerate() {
            match *b {
                Some((fs, fnode)) => {
                    ctx.boundary
                        .push((node as u32, fs as u32, fnode, subsets[fs].lattice.len() as u32))
                }
                None => {
                    let x = plan.xbar[node];
                    let shift = x * i_dt / da;
                    let cell = shift.floor();
                    ctx.nodes.push(node);
                    ctx.cells.push(cell as isize);
                    ctx.frac.push(shift - cell);
                    ctx.drift.push(x * i_t);
                }
            }
        }
        let lo = ctx.cells.iter().copied().min().unwrap_or(0);
        let hi = ctx.cells.iter().copied().max().unwrap_or(0);
        ctx.cell_range = (lo, hi);
        ctx
    }

    /// Waiting values of one `a` slice.
    fn waiting_values(&self, ia: usize, w: &mut [f64]) {
        let nn = self.plan.lattice.len();
        let a = self.a_lo + ia as f64 * self.da;
        for &(node, fs, fnode, fnn) in &self.boundary {
            w[node as usize] = self.faces[fs as usize][ia * fnn as usize + fnode as usize];
        }
        let (lo, hi) = self.cell_range;
        let i = ia as isize;
        let (c, s, ref ramps) = self.ramps;
        let maturity = |x: f64| -> f64 {
            let mut v = c + s * x;
            for &(knot, jump) in ramps {
                let d = x - knot;
                v += jump * if d > 0.0 { d } else { 0.0 };
            }
            v
        };
        let long = self.long_step;
        if i + lo >= 0 && i + hi < self.n_a as isize {
            // Every characteristic foot lands strictly inside the grid.
            for k in 0..self.nodes.len() {
                let node = self.nodes[k];
                let step = self.foot((i + self.cells[k]) as usize, self.frac[k], node, nn);
                let hold = if long { maturity(a + self.drift[k]) } else { step };
                w[node] = if hold > step { hold } else { step };
            }
        } else {
            let top = self.n_a as f64;
            for k in 0..self.nodes.len() {
                let node = self.nodes[k];
                let p = (ia as f64 + self.cells[k] as f64 + self.frac[k]).clamp(0.0, top);
                let cell = (p as usize).min(self.n_a - 1);
                let step = self.foot(cell, p - cell as f64, node, nn);
                let hold = if long { maturity(a + self.drift[k]) } else { step };
                w[node] = if hold > step { hold } else { step };
            }
        }
    }

    /// Value of `node` at fraction `u` of `a` cell `cell` on the previous row.
    #[inline]
    fn foot(&self, cell: usize, u: f64, node: usize, nn: usize) -> f64 {
        let at = |c: usize| self.prev[c * nn + node];
        let (v0, v1) = (at(cell), at(cell + 1));
        let chord = v0 + u * (v1 - v0);
        if !self.subcell {
            return chord;
        }
        let left = if cell > 0 { v0 + u * (v0 - at(cell - 1)) } else { f64::NAN };
        let right = if cell + 2 <= self.n_a { v1 - (1.0 - u) * (at(cell + 2) - v1) } else { f64::NAN };
        if left.is_nan() || right.is_nan() {
            return chord;
        }
        chord.min(left.max(right))
    }

    fn run(&self, out: &mut [f64], (lo, hi): (usize, usize)) {
        let nn = self.plan.lattice.len();
        out.par_chunks_mut(nn).enumerate().for_each_init(
            || (EnvelopeWorkspace::new(), vec![0.0; nn]),
            |(ws, w), (ia, slice)| {
                if ia < lo || ia > hi {
                    slice.fill(f64::NAN);
                    return;
                }
                self.waiting_values(ia, w);
                concave_envelope(&self.plan.lattice, w, slice, ws, None);
                for &(node, ..) in &self.boundary {
                    slice[node as usize] = w[node as usize];
                }
            },
        );
    }
}

impl ValueSurface {
    fn plan(&self) -> &SubsetPlan {
        &self.data.subsets[self.subset]
    }

    /// Atoms of this surface's subset.
    pub fn support(&self) -> &[f64] {
        &self.plan().atoms
    }

    /// Indices of this subset's atoms in the full support.
    pub fn members(&self) -> &[usize] {
        &self.plan().members
    }

    pub fn full_support(&self) -> &[f64] {
        &self.data.support
    }

    pub fn lattice(&self) -> &SimplexLattice {
        &self.plan().lattice
    }

    pub fn payoff(&self) -> &Payoff {
        &self.data.payoff
    }

    pub fn config(&self) -> &SolverConfig {
        &self.data.config
    }

    pub fn warnings(&self) -> &[String] {
        &self.data.warnings
    }

    pub fn horizon(&self) -> f64 {
        self.data.config.horizon
    }

    pub fn n_time(&self) -> usize {
        self.data.config.n_time
    }

    pub fn n_avg(&self) -> usize {
        self.data.config.n_avg
    }

    pub fn time_of(&self, j: usize) -> f64 {
        if j == self.n_time() {
            self.horizon()
        } else {
            j as f64 * self.data.dt
        }
    }

    pub fn a_of(&self, ia: usize) -> f64 {
        self.data.a_lo + ia as f64 * self.data.da
    }

    pub fn a_range(&self) -> (f64, f64) {
        (self.data.a_lo, self.a_of(self.n_avg()))
    }

    /// Range of `a` indices solved on time row `j`.
    pub fn solved_a_indices(&self, j: usize) -> (usize, usize) {
        self.data.bounds[j.min(self.n_time())]
    }

    /// Acceptance tolerance of the scheme.
    pub fn tolerance(&self) -> f64 {
        let c = &self.data.config;
        c.tolerance
            .unwrap_or(5.0 * (self.data.dt + self.data.da + 1.0 / c.n_simplex as f64))
    }

    /// Time indices whose rows are stored.
    pub fn stored_times(&self) -> &[usize] {
        &self.data.kept
    }

    /// Row at time index `j` laid out `[a][node]`, if stored.
    pub fn row(&self, j: usize) -> Option<&[f64]> {
        let k = self.data.kept.binary_search(&j).ok()?;
        Some(&self.data.rows[self.subset][k])
    }

    pub fn node_value(&self, j: usize, ia: usize, node: usize) -> Option<f64> {
        self.row(j).map(|r| r[ia * self.lattice().len() + node])
    }

    /// Surface of the face spanned by `members` (indices into the full
    /// support; must be a nonempty subset of this surface's members).
    pub fn face(&self, members: &[usize]) -> Option<ValueSurface> {
        let mask = mask_of(members);
        let own = mask_of(self.members());
        if mask == 0 || mask & !own != 0 {
            return None;
        }
        self.data.by_mask.get(&mask).map(|&subset| ValueSurface {
            data: Arc::clone(&self.data),
            subset,
        })
    }

    /// All proper faces of this surface.
    pub fn faces(&self) -> Vec<ValueSurface> {
        let own = mask_of(self.members());
        self.data
            .by_mask
            .iter()
            .filter(|(&m, _)| m != own && m & !own == 0)
            .map(|(_, &subset)| ValueSurface {
                data: Arc::clone(&self.data),
                subset,
            })
            .collect()
    }

    /// Interpolated value: linear in `t` between stored rows, linear in `a`,
    /// barycentric on the simplex lattice. `weights` are over this
    /// surface's atoms.
    pub fn query(&self, t: f64, a: f64, weights: &[f64]) -> Result<f64> {
        let (lo, hi) = self.a_range();
        let slack = 1e-12 * (1.0 + hi.abs() + lo.abs());
        if !(t >= 0.0 && t <= self.horizon() * (1.0 + 1e-12)) {
            return Err(Error::OutOfRange(format!("t = {t}")));
        }
        if !(a >= lo - slack && a <= hi + slack) {
            return Err(Error::OutOfRange(format!("a = {a} outside [{lo}, {hi}]")));
        }
        if weights.len() != self.support().len()
            || weights.iter().any(|&w| !(w >= -1e-12))
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::OutOfRange("weights are not a point of the simplex".into()));
        }
        let stencil = self.lattice().stencil(weights);
        let pos = ((a - lo) / self.data.da).clamp(0.0, self.n_avg() as f64);
        let ia = (pos as usize).min(self.n_avg() - 1);
        let ua = pos - ia as f64;

        let jt = (t / self.data.dt).min(self.n_time() as f64);
        let kept = &self.data.kept;
        let k_hi = kept.partition_point(|&j| (j as f64) < jt).min(kept.len() - 1);
        let (k0, k1, ut) = if kept[k_hi] as f64 == jt || k_hi == 0 {
            (k_hi, k_hi, 0.0)
        } else {
            let (j0, j1) = (kept[k_hi - 1] as f64, kept[k_hi] as f64);
            (k_hi - 1, k_hi, (jt - j0) / (j1 - j0))
        };
        let nn = self.lattice().len();
        let at = |k: usize| -> f64 {
            let row = &self.data.rows[self.subset][k];
            stencil
                .iter()
                .map(|&(node, p)| {
                    let v0 = row[ia * nn + node];
                    if ua == 0.0 {
                        return p * v0;
                    }
                    let v1 = row[(ia + 1) * nn + node];
                    p * (v0 + ua * (v1 - v0))
                })
                .sum()
        };
        let v0 = at(k0);
        let v = if k1 == k0 { v0 } else { v0 + ut * (at(k1) - v0) };
        if v.is_nan() {
            return Err(Error::OutOfRange(format!(
                "(t, a) = ({t}, {a}) is not reachable from the solved origin"
            )));
        }
        Ok(v)
    }

    /// Value at time index 0 and `a = a_origin` for the given weights.
    pub fn value_at_origin(&self, weights: &[f64]) -> Result<f64> {
        self.query(0.0, self.data.config.a_origin, weights)
    }
}

/// Action of the optimal control at one grid node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum NodeAction {
    /// Real time advances with the measure frozen.
    Wait,
    /// Diffuse at frozen time toward the listed lattice nodes.
    Diffuse { targets: Vec<u32> },
    Terminal,
}

/// Per-node actions on one time row.
#[derive(Debug, Clone)]
pub struct ExtractedPolicy {
    pub time_index: usize,
    pub t: f64,
    pub n_nodes: usize,
    /// Indices of the `a` grid covered, in order.
    pub a_indices: Vec<usize>,
    /// `actions[k * n_nodes + node]` for `a_indices[k]`.
    pub actions: Vec<NodeAction>,
}

impl ExtractedPolicy {
    pub fn action(&self, k: usize, node: usize) -> &NodeAction {
        &self.actions[k * self.n_nodes + node]
    }

    pub fn count_diffuse(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| matches!(a, NodeAction::Diffuse { .. }))
            .count()
    }

    pub fn count_wait(&self) -> usize {
        self.actions.iter().filter(|a| **a == NodeAction::Wait).count()
    }
}

/// Policy on the row at time index `j` for every `a` index.
pub fn extract_policy(surface: &ValueSurface, j: usize, tolerance: f64) -> Result<ExtractedPolicy> {
    let (lo, hi) = surface.solved_a_indices(j);
    let all: Vec<usize> = (lo..=hi).collect();
    extract_policy_for(surface, j, &all, tolerance)
}

/// Policy on the row at time index `j` for the given `a` indices. A node is
/// DIFFUSE where the envelope exceeds the waiting value by more than
/// `tolerance`.
pub fn extract_policy_for(
    surface: &ValueSurface,
    j: usize,
    a_indices: &[usize],
    tolerance: f64,
) -> Result<ExtractedPolicy> {
    let nn = surface.lattice().len();
    let t = surface.time_of(j);
    if j == surface.n_time() {
        return Ok(ExtractedPolicy {
            time_index: j,
            t,
            n_nodes: nn,
            a_indices: a_indices.to_vec(),
            actions: vec![NodeAction::Terminal; nn * a_indices.len()],
        });
    }
    let data = &surface.data;
    let k0 = data
        .kept
        .binary_search(&j)
        .map_err(|_| Error::OutOfRange(format!("time row {j} not stored")))?;
    let k1 = data
        .kept
        .binary_search(&(j + 1))
        .map_err(|_| Error::OutOfRange(format!("time row {} not stored", j + 1)))?;
    let (lo, hi) = surface.solved_a_indices(j);
    if let Some(ia) = a_indices.iter().find(|&&ia| ia < lo || ia > hi) {
        return Err(Error::OutOfRange(format!("a index {ia} not solved on row {j}")));
    }
    let plan = surface.plan();
    if plan.lattice.dim() == 0 {
        return Ok(ExtractedPolicy {
            time_index: j,
            t,
            n_nodes: 1,
            a_indices: a_indices.to_vec(),
            actions: vec![NodeAction::Wait; a_indices.len()],
        });
    }
    let cfg = &data.config;
    let t_next = surface.time_of(j + 1);
    let faces: Vec<Vec<f64>> = data.rows.iter().map(|r| r[k0].clone()).collect();
    let ctx = StepContext::new(
        plan,
        &data.rows[surface.subset][k1],
        &faces,
        &data.subsets,
        &data.payoff,
        (data.a_lo, data.da, cfg.n_avg),
        cfg.weight.integral(t, t_next),
        cfg.weight.integral(t, cfg.horizon),
        (cfg.wait_to_maturity, cfg.subcell),
    );
    let mut ws = EnvelopeWorkspace::new();
    let mut w = vec![0.0; nn];
    let mut env = vec![0.0; nn];
    let mut support: Vec<Support> = Vec::new();
    let mut actions = Vec::with_capacity(nn * a_indices.len());
    for &ia in a_indices {
        ctx.waiting_values(ia, &mut w);
        concave_envelope(&plan.lattice, &w, &mut env, &mut ws, Some(&mut support));
        for node in 0..nn {
            let boundary = plan.boundary[node].is_some();
            if !boundary && env[node] > w[node] + tolerance && support[node].len() > 1 {
                actions.push(NodeAction::Diffuse {
                    targets: support[node].clone(),
                });
            } else {
                actions.push(NodeAction::Wait);
            }
        }
    }
    Ok(ExtractedPolicy {
        time_index: j,
        t,
        n_nodes: nn,
        a_indices: a_indices.to_vec(),
        actions,
    })
}

/// Laws (as weights over the surface's atoms) that the solved policy splits
/// `weights` into at time 0 and `a = a_origin` before waiting to maturity.
/// A single entry means waiting immediately.
pub fn split_targets(surface: &ValueSurface, weights: &[f64], tolerance: f64) -> Result<Vec<Vec<f64>>> {
    let data = &surface.data;
    let lattice = surface.lattice();
    let pos = ((data.config.a_origin - data.a_lo) / data.da).round();
    let ia = (pos.max(0.0) as usize).min(surface.n_avg());
    let policy = extract_policy_for(surface, 0, &[ia], tolerance)?;
    let nearest = lattice
        .stencil(weights)
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(node, _)| node)
        .expect("nonempty stencil");
    if !matches!(policy.action(0, nearest), NodeAction::Diffuse { .. }) {
        return Ok(vec![weights.to_vec()]);
    }
    // The facet (or segment) of the envelope containing the point itself.
    let mut seen: Vec<&Vec<u32>> = Vec::new();
    for node in 0..lattice.len() {
        if let NodeAction::Diffuse { targets } = policy.action(0, node) {
            if seen.contains(&targets) {
                continue;
            }
            seen.push(targets);
            let pts: Vec<Vec<f64>> = targets.iter().map(|&v| lattice.weights(v as usize)).collect();
            if let Some(bary) = barycentric(&pts, weights) {
                if bary.iter().all(|&l| l >= -1e-9) {
                    return Ok(pts);
                }
            }
        }
    }
    Ok(vec![weights.to_vec()])
}

/// Barycentric coordinates of `p` with respect to affinely independent
/// points, by least squares on the normal equations.
pub(crate) fn barycentric(pts: &[Vec<f64>], p: &[f64]) -> Option<Vec<f64>> {
    let m = pts.len();
    if m == 1 {
        let d: f64 = pts[0].iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
        return (d < 1e-9).then(|| vec![1.0]);
    }
    // Unknowns λ_1..λ_{m-1}; λ_0 = 1 - Σ.
    let k = m - 1;
    let dirs: Vec<Vec<f64>> = pts[1..]
        .iter()
        .map(|q| q.iter().zip(&pts[0]).map(|(a, b)| a - b).collect())
        .collect();
    let rhs: Vec<f64> = p.iter().zip(&pts[0]).map(|(a, b)| a - b).collect();
    let mut g = vec![vec![0.0; k + 1]; k];
    for r in 0..k {
        for c in 0..k {
            g[r][c] = dirs[r].iter().zip(&dirs[c]).map(|(a, b)| a * b).sum();
        }
        g[r][k] = dirs[r].iter().zip(&rhs).map(|(a, b)| a * b).sum();
    }
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| g[i][c].abs().total_cmp(&g[j][c].abs()))?;
        if g[piv][c].abs() < 1e-14 {
            return None;
        }
        g.swap(c, piv);
        for r in 0..k {
            if r != c {
                let f = g[r][c] / g[c][c];
                for cc in c..=k {
                    g[r][cc] -= f * g[c][cc];
                }
            }
        }
    }
    let lam: Vec<f64> = (0..k).map(|i| g[i][k] / g[i][i]).collect();
    // Reject points off the affine hull.
    let mut resid = 0.0_f64;
    for d in 0..p.len() {
        let v = pts[0][d] + (0..k).map(|i| lam[i] * dirs[i][d]).sum::<f64>();
        resid = resid.max((v - p[d]).abs());
    }
    if resid > 1e-9 {
        return None;
    }
    let mut out = vec![1.0 - lam.iter().sum::<f64>()];
    out.extend(lam);
    Some(out)
}

/// One line of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n_time: usize,
    pub n_avg: usize,
    pub n_simplex: u32,
    pub max_error: f64,
    pub tolerance: f64,
}

/// Solves each configuration and records the largest deviation from
/// `oracle(weights)` over the simplex nodes at `t = 0`, `a = a_origin`.
pub fn convergence_study(
    support: &[f64],
    payoff: &Payoff,
    configs: &[SolverConfig],
    oracle: &dyn Fn(&[f64]) -> f64,
) -> Result<Vec<ConvergenceRow>> {
    configs
        .iter()
        .map(|cfg| {
            let surface = solve(support, payoff, cfg)?;
            let lattice = surface.lattice();
            let mut max_error = 0.0_f64;
            for node in 0..lattice.len() {
                let w = lattice.weights(node);
                let v = surface.value_at_origin(&w)?;
                max_error = max_error.max((v - oracle(&w)).abs());
            }
            Ok(ConvergenceRow {
                n_time: cfg.n_time,
                n_avg: cfg.n_avg,
                n_simplex: cfg.n_simplex,
                max_error,
                tolerance: surface.tolerance(),
            })
        })
        .collect()
}
