//! Shared fixtures for the criterion benchmarks.

use fusenet::geometry::PointSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic cloud of `n` points spread like a road scene.
pub fn point_cloud(n: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(1.0..60.0),
            ]
        })
        .collect();
    PointSet::new(coords).unwrap()
}
