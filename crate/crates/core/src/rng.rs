//! Seeded RNG streams.
//!
//! All randomness in the crate flows through ChaCha12 streams derived from a
//! user-visible seed plus a lane number. Distinct lanes of the same seed are
//! independent, so concurrent jobs can draw from disjoint streams without
//! coordination and results do not depend on scheduling order.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Returns the ChaCha12 stream for `(seed, lane)`.
pub fn stream(seed: u64, lane: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

/// Draws an n-vector of iid standard normals.
pub fn normal_vector(rng: &mut ChaCha12Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// Draws an n-by-d matrix of iid standard normals, row major.
pub fn normal_matrix(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Array2<f64> {
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Array2::from_shape_vec((n, d), data).expect("shape matches allocation")
}
