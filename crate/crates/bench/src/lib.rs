//! Shared fixtures for the benchmarks.

use asian_bound::hjb::lattice::SimplexLattice;
use asian_bound::{AtomicMeasure, Payoff};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The three-atom call spread on `{-1, 0, 1}` with `K1 = -0.1`, `K2 = 0.5`.
pub fn call_spread_instance() -> (Vec<f64>, Payoff, AtomicMeasure) {
    let support = vec![-1.0, 0.0, 1.0];
    let payoff = Payoff::call_spread(-0.1, 0.5).unwrap();
    let m = AtomicMeasure::new_signed(support.clone(), vec![0.25, 0.25, 0.5]).unwrap();
    (support, payoff, m)
}

/// Node values with a known concave part plus noise, so the envelope has
/// real work to do.
pub fn noisy_lattice_values(lattice: &SimplexLattice, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lattice.len())
        .map(|node| {
            let w = lattice.weights(node);
            let base = w.iter().map(|x| x * (1.0 - x)).sum::<f64>();
            base + 0.05 * rng.random::<f64>()
        })
        .collect()
}

pub fn random_measure(rng: &mut ChaCha8Rng, n_atoms: usize) -> AtomicMeasure {
    let mut atoms: Vec<f64> = (0..n_atoms).map(|_| rng.random_range(0.0..10.0)).collect();
    atoms.sort_by(f64::total_cmp);
    atoms.dedup();
    let raw: Vec<f64> = atoms.iter().map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    AtomicMeasure::new(atoms, raw.iter().map(|w| w / total).collect()).unwrap()
}
