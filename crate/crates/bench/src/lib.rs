//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simclf_core::Embedding;

pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Embedding::normalize(v).expect("nonzero")
        })
        .collect()
}

/// Token id sequences avoiding the reserved ids 0 and 1.
pub fn token_batch(n: usize, len: usize, vocab_size: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(2..vocab_size as u32)).collect())
        .collect()
}

pub fn scored_pairs(n: usize, seed: u64) -> Vec<simclf_core::ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let similar = i % 2 == 0;
            let shift = if similar { 0.3 } else { 0.0 };
            simclf_core::ScoredPair::new(rng.random_range(-1.0..1.0) + shift, similar)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded() {
        assert_eq!(unit_vectors(4, 8, 1), unit_vectors(4, 8, 1));
        assert_eq!(token_batch(3, 5, 50, 2), token_batch(3, 5, 50, 2));
        assert!(token_batch(10, 10, 50, 3).iter().flatten().all(|&t| (2..50).contains(&t)));
    }
}
