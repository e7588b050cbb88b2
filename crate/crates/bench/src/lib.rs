//! Inputs shared by the benchmarks.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdpcoulomb::{theta_pure, Tensor3, TripleMoment};

/// Random symmetric matrix with entries in `[-1, 1]`.
pub fn symmetric_matrix(n: usize, seed: u64) -> Mat<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = rng.random_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Uniform mixture of `components` random configurations of `electrons` electrons
/// on `sites` sites.
pub fn mixture_moment(
    sites: usize,
    electrons: usize,
    components: usize,
    seed: u64,
) -> TripleMoment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Tensor3::zeros(sites);
    for _ in 0..components {
        let mut lambda = vec![0.0; sites];
        let mut placed = 0;
        while placed < electrons {
            let i = rng.random_range(0..sites);
            if lambda[i] == 0.0 {
                lambda[i] = 1.0;
                placed += 1;
            }
        }
        let t = theta_pure(&lambda);
        for (a, b) in acc.data.iter_mut().zip(&t.tensor.data) {
            *a += b / components as f64;
        }
    }
    TripleMoment { tensor: acc }
}
