//! Upper concave envelopes of functions sampled on simplex lattices.
//!
//! * `Δ^1`: upper hull of a point sequence (monotone chain).
//! * `Δ^2`: upper facets of the 3-D hull of the lifted lattice, built by an
//!   incremental quickhull over the triangular lattice. Containment and
//!   orientation use exact integer arithmetic; heights are floating point.
//! * `Δ^3`: one small linear program per node (experimental).

use super::lattice::SimplexLattice;

/// Relative tolerance below which a point counts as on the envelope.
const REL_EPS: f64 = 1e-12;

const NONE: u32 = u32::MAX;

/// Supporting nodes of the envelope at one lattice node: the endpoints of the
/// segment or the vertices of the facet whose interpolation gives the value.
pub type Support = Vec<u32>;

/// Reusable scratch space for envelope computations.
#[derive(Debug, Default)]
pub struct EnvelopeWorkspace {
    hull: Hull2d,
    chain: Vec<usize>,
}

impl EnvelopeWorkspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Writes the upper concave envelope of `values` (one per lattice node) into
/// `out`. When `support` is given it receives, per node, the lattice nodes
/// spanning the supporting segment or facet.
pub fn concave_envelope(
    lattice: &SimplexLattice,
    values: &[f64],
    out: &mut [f64],
    ws: &mut EnvelopeWorkspace,
    support: Option<&mut Vec<Support>>,
) {
    match lattice.dim() {
        0 => {
            out[0] = values[0];
            if let Some(s) = support {
                s.clear();
                s.push(vec![0]);
            }
        }
        1 => envelope_1d(values, out, &mut ws.chain, support),
        2 => ws.hull.envelope(lattice.resolution() as i64, values, out, support),
        3 => envelope_lp(lattice, values, out, support),
        d => panic!("unsupported simplex dimension {d}"),
    }
}

fn eps_for(values: &[f64]) -> f64 {
    // Four lanes so the reduction vectorizes.
    let mut lanes = [0.0_f64; 4];
    let chunks = values.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..4 {
            let v = c[k].abs();
            lanes[k] = if v > lanes[k] { v } else { lanes[k] };
        }
    }
    let m = rest.iter().chain(&lanes).fold(0.0_f64, |m, v| m.max(v.abs()));
    REL_EPS * (1.0 + m)
}

/// `max` without NaN handling, for inner loops.
#[inline(always)]
fn fmax(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

/// Upper hull vertex indices of the points `(i, values[i])`.
fn upper_chain(values: &[f64], eps: f64, chain: &mut Vec<usize>) {
    chain.clear();
    for i in 0..values.len() {
        while chain.len() >= 2 {
            let (a, b) = (chain[chain.len() - 2], chain[chain.len() - 1]);
            let chord = values[a] + (values[i] - values[a]) * (b - a) as f64 / (i - a) as f64;
            if values[b] <= chord + eps {
                chain.pop();
            } else {
                break;
            }
        }
        chain.push(i);
    }
}

fn envelope_1d(values: &[f64], out: &mut [f64], chain: &mut Vec<usize>, support: Option<&mut Vec<Support>>) {
    let eps = eps_for(values);
    upper_chain(values, eps, chain);
    let mut sup = support;
    if let Some(s) = sup.as_deref_mut() {
        s.clear();
    }
    for w in chain.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a..b {
            let u = (i - a) as f64 / (b - a) as f64;
            out[i] = (values[a] + u * (values[b] - values[a])).max(values[i]);
            if let Some(s) = sup.as_deref_mut() {
                s.push(if i == a { vec![a as u32] } else { vec![a as u32, b as u32] });
            }
        }
    }
    let last = values.len() - 1;
    out[last] = values[last];
    if let Some(s) = sup {
        s.push(vec![last as u32]);
    }
}

#[derive(Debug, Clone)]
struct Facet {
    v: [u32; 3],
    nbr: [u32; 3],
    /// Height at `v[0]` and gradient in lattice coordinates.
    z0: f64,
    gx: f64,
    gy: f64,
    alive: bool,
    outside: Vec<(u32, f64)>,
}

/// Incremental upper hull over the triangular lattice `{(i, j): i + j <= n}`.
#[derive(Debug, Default)]
struct Hull2d {
    n: i64,
    xy: Vec<(i64, i64)>,
    z: Vec<f64>,
    facets: Vec<Facet>,
    stack: Vec<u32>,
    visible: Vec<u32>,
    is_visible: Vec<bool>,
    horizon: Vec<(u32, u32, u32)>,
    fan: Vec<u32>,
    moved: Vec<u32>,
    written: Vec<bool>,
    chain: Vec<usize>,
    line: Vec<f64>,
    line_out: Vec<f64>,
}

#[inline]
fn orient(p: (i64, i64), q: (i64, i64), r: (i64, i64)) -> i64 {
    (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
}

#[inline]
fn tri_index(n: i64, i: i64, j: i64) -> usize {
    (i * (n + 1) - i * (i - 1) / 2 + j) as usize
}

impl Hull2d {
    fn setup(&mut self, n: i64) {
        if self.n != n || self.xy.is_empty() {
            self.n = n;
            self.xy.clear();
            for i in 0..=n {
                for j in 0..=n - i {
                    self.xy.push((i, j));
                }
            }
        }
        let len = self.xy.len();
        self.facets.clear();
        self.stack.clear();
        self.is_visible.clear();
        self.written.clear();
        self.written.resize(len, false);
    }

    fn make_facet(&self, v: [u32; 3], nbr: [u32; 3]) -> Facet {
        let p: [(i64, i64); 3] = [self.xy[v[0] as usize], self.xy[v[1] as usize], self.xy[v[2] as usize]];
        let z: [f64; 3] = [self.z[v[0] as usize], self.z[v[1] as usize], self.z[v[2] as usize]];
        let det = orient(p[0], p[1], p[2]) as f64;
        let (x1, y1) = ((p[1].0 - p[0].0) as f64, (p[1].1 - p[0].1) as f64);
        let (x2, y2) = ((p[2].0 - p[0].0) as f64, (p[2].1 - p[0].1) as f64);
        let (dz1, dz2) = (z[1] - z[0], z[2] - z[0]);
        Facet {
            v,
            nbr,
            z0: z[0],
            gx: (dz1 * y2 - dz2 * y1) / det,
            gy: (x1 * dz2 - x2 * dz1) / det,
            alive: true,
            outside: Vec::new(),
        }
    }

    #[inline]
    fn height(&self, f: &Facet, q: usize) -> f64 {
        let o = self.xy[f.v[0] as usize];
        let (x, y) = self.xy[q];
        f.z0 + f.gx * (x - o.0) as f64 + f.gy * (y - o.1) as f64
    }

    #[inline]
    fn contains(&self, f: &Facet, q: usize) -> bool {
        let p = self.xy[q];
        let a = self.xy[f.v[0] as usize];
        let b = self.xy[f.v[1] as usize];
        let c = self.xy[f.v[2] as usize];
        orient(a, b, p) >= 0 && orient(b, c, p) >= 0 && orient(c, a, p) >= 0
    }

    /// Replaces the values on the three domain edges by their 1-D envelopes
    /// and returns the interior candidate mask through `self.written`
    /// (reused as scratch: true marks nodes that are final already).
    fn prepare_boundary(&mut self, eps: f64) {
        let n = self.n;
        let edges: [Vec<usize>; 3] = [
            (0..=n).map(|i| tri_index(n, i, 0)).collect(),
            (0..=n).map(|j| tri_index(n, n - j, j)).collect(),
            (0..=n).map(|j| tri_index(n, 0, n - j)).collect(),
        ];
        for edge in &edges {
            self.line.clear();
            self.line.extend(edge.iter().map(|&q| self.z[q]));
            upper_chain(&self.line, eps, &mut self.chain);
            self.line_out.clear();
            self.line_out.resize(self.line.len(), 0.0);
            for w in self.chain.windows(2) {
                let (a, b) = (w[0], w[1]);
                for i in a..=b {
                    let u = (i - a) as f64 / (b - a) as f64;
                    self.line_out[i] = (self.line[a] + u * (self.line[b] - self.line[a])).max(self.line[i]);
                }
            }
            for (k, &q) in edge.iter().enumerate() {
                self.z[q] = self.line_out[k];
                // Non-vertex boundary nodes never enter the hull.
                self.written[q] = true;
            }
            for &k in &self.chain {
                self.written[edge[k]] = false;
            }
        }
    }

    fn envelope(&mut self, n: i64, values: &[f64], out: &mut [f64], support: Option<&mut Vec<Support>>) {
        self.setup(n);
        self.z.clear();
        self.z.extend_from_slice(values);
        // Boundary replacement only raises values within the data range.
        let eps = eps_for(&self.z);
        self.prepare_boundary(eps);

        // The plane through the corners, written optimistically: when no
        // node rises above it, it is the envelope.
        let corners = [tri_index(n, 0, 0) as u32, tri_index(n, n, 0) as u32, tri_index(n, 0, n) as u32];
        let mut f0 = self.make_facet(corners, [NONE; 3]);
        let mut q = 0;
        for i in 0..=n {
            let row = f0.z0 + f0.gx * i as f64;
            for j in 0..=n - i {
                let h = row + f0.gy * j as f64;
                let z = self.z[q];
                out[q] = fmax(h, z);
                if z - h > eps && !self.written[q] {
                    f0.outside.push((q as u32, z - h));
                }
                q += 1;
            }
        }
        if f0.outside.is_empty() {
            if let Some(s) = support {
                s.clear();
                s.extend((0..self.xy.len() as u32).map(|q| {
                    if corners.contains(&q) {
                        vec![q]
                    } else {
                        corners.to_vec()
                    }
                }));
            }
            return;
        }
        self.facets.push(f0);
        self.stack.push(0);

        let budget = 20 * self.xy.len() + 100;
        let mut steps = 0;
        while let Some(fi) = self.stack.pop() {
            let fi = fi as usize;
            while self.facets[fi].alive && !self.facets[fi].outside.is_empty() {
                steps += 1;
                if steps > budget {
                    break;
                }
                let (pos, &(p, _)) = self.facets[fi]
                    .outside
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .unwrap();
                self.facets[fi].outside.swap_remove(pos);
                self.insert(fi as u32, p, eps);
            }
        }

        // Rasterize the final facets.
        for w in self.written.iter_mut() {
            *w = false;
        }
        let mut sup = support;
        if let Some(s) = sup.as_deref_mut() {
            s.clear();
            s.resize(self.xy.len(), Vec::new());
        }
        for fi in 0..self.facets.len() {
            if !self.facets[fi].alive {
                continue;
            }
            let f = &self.facets[fi];
            let pts = [self.xy[f.v[0] as usize], self.xy[f.v[1] as usize], self.xy[f.v[2] as usize]];
            let xmin = pts.iter().map(|p| p.0).min().unwrap();
            let xmax = pts.iter().map(|p| p.0).max().unwrap();
            for x in xmin..=xmax {
                let (mut lo, mut hi) = (0i64, n - x);
                for k in 0..3 {
                    let (a, b) = (pts[k], pts[(k + 1) % 3]);
                    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                    // dx (y - a.y) >= dy (x - a.x)
                    let rhs = dy * (x - a.0);
                    if dx > 0 {
                        lo = lo.max(a.1 + ceil_div(rhs, dx));
                    } else if dx < 0 {
                        hi = hi.min(a.1 + floor_div(-rhs, -dx));
                    } else if rhs > 0 {
                        hi = -1;
                    }
                }
                for y in lo..=hi {
                    let q = tri_index(n, x, y);
                    if self.written[q] {
                        continue;
                    }
                    self.written[q] = true;
                    out[q] = fmax(self.height(f, q), self.z[q]);
                    if let Some(s) = sup.as_deref_mut() {
                        let vs: Vec<u32> = f.v.to_vec();
                        s[q] = if vs.contains(&(q as u32)) { vec![q as u32] } else { vs };
                    }
                }
            }
        }
        debug_assert!(self.written.iter().all(|&w| w), "rasterization left gaps");
    }

    /// Inserts point `p` seen from facet `fi`. On numerical trouble the
    /// point is dropped, which leaves the envelope slightly low there.
    fn insert(&mut self, fi: u32, p: u32, eps: f64) {
        let pxy = self.xy[p as usize];
        let zp = self.z[p as usize];
        self.is_visible.resize(self.facets.len(), false);
        self.visible.clear();
        self.visible.push(fi);
        self.is_visible[fi as usize] = true;
        let mut head = 0;
        while head < self.visible.len() {
            let f = self.visible[head] as usize;
            head += 1;
            for k in 0..3 {
                let g = self.facets[f].nbr[k];
                if g == NONE || self.is_visible[g as usize] {
                    continue;
                }
                if zp - self.height(&self.facets[g as usize], p as usize) > 0.0 {
                    self.is_visible[g as usize] = true;
                    self.visible.push(g);
                }
            }
        }

        // Grow the visible region until p sees every horizon edge strictly
        // from the inside; otherwise the fan would fold over.
        let mut split: Option<(u32, u32)>;
        let ok = loop {
            self.horizon.clear();
            split = None;
            let mut grew = false;
            let mut fail = false;
            for idx in 0..self.visible.len() {
                let f = self.visible[idx] as usize;
                for k in 0..3 {
                    let g = self.facets[f].nbr[k];
                    if g != NONE && self.is_visible[g as usize] {
                        continue;
                    }
                    let (u, v) = (self.facets[f].v[k], self.facets[f].v[(k + 1) % 3]);
                    let o = orient(self.xy[u as usize], self.xy[v as usize], pxy);
                    if o > 0 {
                        self.horizon.push((u, v, g));
                    } else if g == NONE {
                        if o == 0 && split.is_none() && strictly_between(self.xy[u as usize], self.xy[v as usize], pxy) {
                            split = Some((u, v));
                            self.horizon.push((u, v, g));
                        } else {
                            fail = true;
                        }
                    } else {
                        self.is_visible[g as usize] = true;
                        self.visible.push(g);
                        grew = true;
                    }
                }
            }
            if fail {
                break false;
            }
            if !grew {
                break true;
            }
        };
        if !ok || !self.order_horizon() {
            for &f in &self.visible {
                self.is_visible[f as usize] = false;
            }
            return;
        }

        // Build the fan around p.
        let m = self.horizon.len();
        let base = self.facets.len() as u32;
        self.fan.clear();
        let mut slot = vec![NONE; m];
        let mut next = base;
        for (i, &(u, v, _)) in self.horizon.iter().enumerate() {
            if Some((u, v)) == split {
                continue;
            }
            slot[i] = next;
            next += 1;
        }
        for i in 0..m {
            let (u, v, g) = self.horizon[i];
            if slot[i] == NONE {
                continue;
            }
            let nxt = slot[(i + 1) % m];
            let prv = slot[(i + m - 1) % m];
            let facet = self.make_facet([u, v, p], [g, nxt, prv]);
            self.facets.push(facet);
            self.is_visible.push(false);
            self.fan.push(slot[i]);
            if g != NONE {
                let gf = &mut self.facets[g as usize];
                for k in 0..3 {
                    if gf.v[k] == v && gf.v[(k + 1) % 3] == u {
                        gf.nbr[k] = slot[i];
                    }
                }
            }
        }

        // Retire the visible facets and hand their points to the fan. Vertices
        // swallowed by a forced expansion are re-offered as points too.
        self.moved.clear();
        for idx in 0..self.visible.len() {
            let f = self.visible[idx] as usize;
            self.facets[f].alive = false;
            self.is_visible[f] = false;
            let pts = std::mem::take(&mut self.facets[f].outside);
            self.moved.extend(pts.iter().map(|&(q, _)| q));
            for k in 0..3 {
                let w = self.facets[f].v[k];
                if w != p && !self.horizon.iter().any(|&(u, v, _)| u == w || v == w) {
                    self.moved.push(w);
                }
            }
        }
        self.moved.sort_unstable();
        self.moved.dedup();
        for idx in 0..self.moved.len() {
            let q = self.moved[idx] as usize;
            if q as u32 == p {
                continue;
            }
            for &fi in &self.fan {
                let f = &self.facets[fi as usize];
                if self.contains(f, q) {
                    let d = self.z[q] - self.height(f, q);
                    if d > eps {
                        self.facets[fi as usize].outside.push((q as u32, d));
                    }
                    break;
                }
            }
        }
        for idx in 0..self.fan.len() {
            let fi = self.fan[idx];
            if !self.facets[fi as usize].outside.is_empty() {
                self.stack.push(fi);
            }
        }
    }

    /// Sorts the horizon edges into one closed loop; false if they do not
    /// form exactly one cycle.
    fn order_horizon(&mut self) -> bool {
        let m = self.horizon.len();
        if m < 2 {
            return false;
        }
        for i in 0..m - 1 {
            let end = self.horizon[i].1;
            match (i + 1..m).find(|&j| self.horizon[j].0 == end) {
                Some(j) => self.horizon.swap(i + 1, j),
                None => return false,
            }
        }
        self.horizon[m - 1].1 == self.horizon[0].0
    }
}

fn strictly_between(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    let d1 = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
    let len = (b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1);
    d1 > 0 && d1 < len
}

fn floor_div(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    a.div_euclid(b)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    -((-a).div_euclid(b))
}

/// Envelope on `Δ^3` by solving, per node `p`, the linear program
/// `max Σ λ_i W_i` over convex weights `λ` with `Σ λ_i c_i = p`.
fn envelope_lp(lattice: &SimplexLattice, values: &[f64], out: &mut [f64], support: Option<&mut Vec<Support>>) {
    let k = lattice.dim();
    let eps = eps_for(values);
    let cols: Vec<Vec<f64>> = (0..lattice.len())
        .map(|j| {
            let mut c: Vec<f64> = lattice.counts(j)[1..].iter().map(|&v| v as f64).collect();
            c.push(1.0);
            c
        })
        .collect();
    let vertices: Vec<usize> = (0..=k).map(|i| lattice.vertex(i)).collect();
    let mut sup = support;
    if let Some(s) = sup.as_deref_mut() {
        s.clear();
    }
    for node in 0..lattice.len() {
        let (v, basis) = lp_envelope_at(&cols, values, &vertices, node, eps);
        out[node] = v.max(values[node]);
        if let Some(s) = sup.as_deref_mut() {
            if out[node] <= values[node] + eps {
                s.push(vec![node as u32]);
            } else {
                s.push(basis.into_iter().map(|j| j as u32).collect());
            }
        }
    }
}

/// Revised simplex started from the vertex basis, which is always feasible.
fn lp_envelope_at(cols: &[Vec<f64>], w: &[f64], vertices: &[usize], node: usize, eps: f64) -> (f64, Vec<usize>) {
    let m = cols[0].len();
    let rhs = &cols[node];
    let mut basis: Vec<usize> = vertices.to_vec();
    let mut x = solve_dense(&basis_matrix(cols, &basis), rhs).expect("vertex basis is regular");
    for iter in 0..500 {
        let bt = transpose(&basis_matrix(cols, &basis));
        let cb: Vec<f64> = basis.iter().map(|&j| w[j]).collect();
        let y = match solve_dense(&bt, &cb) {
            Some(y) => y,
            None => break,
        };
        // Dantzig pricing, switching to Bland's rule to escape cycling.
        let bland = iter > 50;
        let mut enter = None;
        let mut best = eps;
        for (j, col) in cols.iter().enumerate() {
            if basis.contains(&j) {
                continue;
            }
            let r = w[j] - col.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
            if r > best {
                enter = Some(j);
                if bland {
                    break;
                }
                best = r;
            }
        }
        let Some(e) = enter else { break };
        let d = match solve_dense(&basis_matrix(cols, &basis), &cols[e]) {
            Some(d) => d,
            None => break,
        };
        let mut leave = None;
        let mut ratio = f64::INFINITY;
        for i in 0..m {
            if d[i] > 1e-12 {
                let r = x[i] / d[i];
                if r < ratio - 1e-15 || (bland && r <= ratio && leave.is_some_and(|l: usize| basis[i] < basis[l])) {
                    ratio = r;
                    leave = Some(i);
                }
            }
        }
        let Some(l) = leave else { break };
        basis[l] = e;
        x = match solve_dense(&basis_matrix(cols, &basis), rhs) {
            Some(x) => x,
            None => break,
        };
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let value = basis.iter().zip(&x).map(|(&j, &l)| l * w[j]).sum();
    let active = basis.iter().zip(&x).filter(|(_, &l)| l > 1e-12).map(|(&j, _)| j).collect();
    (value, active)
}

fn basis_matrix(cols: &[Vec<f64>], basis: &[usize]) -> Vec<Vec<f64>> {
    let m = cols[0].len();
    (0..m).map(|r| basis.iter().map(|&j| cols[j][r]).collect()).collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|c| a.iter().map(|row| row[c]).collect()).collect()
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &r)| {
        let mut row = row.clone();
        row.push(r);
        row
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < 1e-12 {
            return None;
        }
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                if f != 0.0 {
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}
