//! Shared fixtures for the benchmarks.

use hybridq_core::nsga2::{Individual, Objectives};
use hybridq_core::Genome;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `size` random `n`-qubit individuals with random objectives.
pub fn random_population(size: usize, n: usize, seed: u64) -> Vec<Individual> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let g = Genome::random(n, &mut rng).expect("valid qubit count");
            let acc = f64::from(rng.gen_range(0..=30u8)) / 30.0;
            let gates = g.gate_count();
            Individual::new(g, Objectives::new(acc, gates))
        })
        .collect()
}

/// A deterministic feature vector of length `len`.
pub fn sample_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
}
