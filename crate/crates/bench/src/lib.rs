//! Seeded inputs shared by the criterion benches.

use lidarseg::{Point, PointCloud, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points uniform in a 100 m x 100 m x 6 m slab around the sensor.
pub fn uniform_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect(),
    )
}

/// Row-major `[n, c]` features in `[-1, 1)`.
pub fn features(n: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(uniform_cloud(10, 1), uniform_cloud(10, 1));
        assert_eq!(features(4, 3, 2), features(4, 3, 2));
        assert_eq!(features(4, 3, 2).shape(), &[4, 3]);
    }
}
