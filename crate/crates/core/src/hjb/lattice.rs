//! Regular lattices on the probability simplex.
//!
//! A node of the lattice with resolution `n` on `Δ^k` is a composition
//! `(c_0, ..., c_k)` of `n`; it represents the weights `c_i / n`. Nodes are
//! numbered lexicographically in `(c_1, ..., c_k)`, so on `Δ^2` node
//! `(i, j) = (c_1, c_2)` has index `i (n + 1) - i (i - 1) / 2 + j`.

use std::collections::HashMap;

/// Largest supported simplex dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone)]
pub struct SimplexLattice {
    dim: usize,
    n: u32,
    counts: Vec<[u32; MAX_DIM + 1]>,
    index: HashMap<[u32; MAX_DIM + 1], u32>,
}

impl SimplexLattice {
    pub fn new(dim: usize, n: u32) -> Self {
        assert!(dim <= MAX_DIM, "simplex dimension {dim} not supported");
        assert!(n >= 1 || dim == 0, "lattice resolution must be positive");
        let mut counts = Vec::new();
        let mut c = [0u32; MAX_DIM + 1];
        enumerate(dim, n, 1, n, &mut c, &mut counts);
        let index = counts
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Self { dim, n, counts, index }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> u32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Counts `(c_0, ..., c_k)` of a node; unused trailing entries are 0.
    pub fn counts(&self, node: usize) -> &[u32] {
        &self.counts[node][..=self.dim]
    }

    pub fn weights(&self, node: usize) -> Vec<f64> {
        self.counts(node)
            .iter()
            .map(|&c| c as f64 / self.n.max(1) as f64)
            .collect()
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        let mut key = [0u32; MAX_DIM + 1];
        key[..counts.len()].copy_from_slice(counts);
        self.index.get(&key).map(|&i| i as usize)
    }

    /// True when every coordinate of the node is positive.
    pub fn is_interior(&self, node: usize) -> bool {
        self.counts(node).iter().all(|&c| c > 0)
    }

    /// Index of the vertex `e_i`.
    pub fn vertex(&self, i: usize) -> usize {
        let mut c = [0u32; MAX_DIM + 1];
        c[i] = self.n;
        self.index_of(&c[..=self.dim]).expect("vertex is a node")
    }

    /// Barycentric interpolation stencil of a simplex point: up to `k + 1`
    /// nodes with nonnegative weights summing to one. Uses the Freudenthal
    /// triangulation in cumulative coordinates, which is exact at nodes.
    pub fn stencil(&self, weights: &[f64]) -> Vec<(usize, f64)> {
        let k = self.dim;
        let n = self.n as f64;
        if k == 0 {
            return vec![(0, 1.0)];
        }
        // z_m = n * (w_m + ... + w_k), decreasing in m, all within [0, n].
        let mut z = vec![0.0; k];
        let mut acc = 0.0;
        for m in (1..=k).rev() {
            acc += weights[m];
            let v = (acc * n).clamp(0.0, n);
            // Snap roundoff so that nodes hit exactly.
            z[m - 1] = if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        }
        for m in 1..k {
            if z[m] > z[m - 1] {
                z[m] = z[m - 1];
            }
        }
        let base: Vec<i64> = z.iter().map(|&v| (v.floor() as i64).min(self.n as i64 - 1).max(0)).collect();
        let frac: Vec<f64> = z.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (0..k).collect();
        // Ties keep the lower index first so the cumulative order survives.
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
        let mut out = Vec::with_capacity(k + 1);
        let mut vertex = base.clone();
        let mut prev = 1.0;
        for step in 0..=k {
            let f = if step < k { frac[order[step]] } else { 0.0 };
            let w = prev - f;
            if w > 0.0 {
                out.push((self.node_from_cumulative(&vertex), w));
            }
            if step < k {
                vertex[order[step]] += 1;
                prev = f;
            }
        }
        out
    }

    fn node_from_cumulative(&self, z: &[i64]) -> usize {
        let k = self.dim;
        let mut c = [0u32; MAX_DIM + 1];
        for m in 1..=k {
            let next = if m < k { z[m] } else { 0 };
            c[m] = (z[m - 1] - next) as u32;
        }
        c[0] = self.n - c[1..=k].iter().sum::<u32>();
        self.index_of(&c[..=k]).expect("stencil vertex is a lattice node")
    }
}

fn enumerate(dim: usize, n: u32, pos: usize, remaining: u32, c: &mut [u32; MAX_DIM + 1], out: &mut Vec<[u32; MAX_DIM + 1]>) {
    if pos > dim {
        c[0] = remaining;
        out.push(*c);
        return;
    }
    for v in 0..=remaining {
        c[pos] = v;
        enumerate(dim, n, pos + 1, remaining - v, c, out);
    }
    c[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(SimplexLattice::new(0, 5).len(), 1);
        assert_eq!(SimplexLattice::new(1, 5).len(), 6);
        assert_eq!(SimplexLattice::new(2, 4).len(), 15);
        assert_eq!(SimplexLattice::new(3, 4).len(), 35);
    }

    #[test]
    fn triangle_index_formula() {
        let n = 7u32;
        let l = SimplexLattice::new(2, n);
        for i in 0..=n {
            for j in 0..=n - i {
                let idx = (i * (n + 1) - i * i.saturating_sub(1) / 2 + j) as usize;
                assert_eq!(l.counts(idx), &[n - i - j, i, j]);
            }
        }
    }

    #[test]
    fn stencil_is_exact_at_nodes() {
        for dim in 1..=3 {
            let l = SimplexLattice::new(dim, 5);
            for node in 0..l.len() {
                let s = l.stencil(&l.weights(node));
                assert_eq!(s.len(), 1, "node {node} dim {dim}: {s:?}");
                assert_eq!(s[0].0, node);
            }
        }
    }

    #[test]
    fn stencil_reproduces_point() {
        let l = SimplexLattice::new(2, 6);
        for w in [[0.2, 0.3, 0.5], [0.11, 0.77, 0.12], [0.0, 0.5, 0.5], [1.0 / 3.0; 3]] {
            let s = l.stencil(&w);
            let total: f64 = s.iter().map(|p| p.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for d in 0..3 {
                let x: f64 = s.iter().map(|&(i, p)| p * l.weights(i)[d]).sum();
                assert!((x - w[d]).abs() < 1e-12, "{w:?}");
            }
        }
        let l3 = SimplexLattice::new(3, 4);
        let w = [0.1, 0.2, 0.3, 0.4];
        let s = l3.stencil(&w);
        for d in 0..4 {
            let x: f64 = s.iter().map(|&(i, p)| p * l3.weights(i)[d]).sum();
            assert!((x - w[d]).abs() < 1e-12);
        }
    }
}
