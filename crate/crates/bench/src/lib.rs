//! Seeded fixtures shared by the benchmarks.

use dptempcoh::{FeatureGrid, VisionBank};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(frames: usize, channels: usize, side: usize, seed: u64) -> FeatureGrid {
    let mut r = rng(seed);
    let values = Array4::from_shape_fn((frames, channels, side, side), |_| r.random_range(-1.0f32..1.0));
    FeatureGrid::new(values, 8).unwrap()
}

pub fn bank(entries: usize, channels: usize, seed: u64) -> VisionBank {
    let mut r = rng(seed);
    VisionBank::new(Array2::from_shape_fn((entries, channels), |_| r.random_range(-1.0f32..1.0))).unwrap()
}

pub fn frame(side: usize, seed: u64) -> Array3<f32> {
    let mut r = rng(seed);
    Array3::from_shape_fn((3, side, side), |_| r.random_range(0.0f32..1.0))
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(super::grid(2, 4, 3, 7), super::grid(2, 4, 3, 7));
        assert_eq!(super::frame(8, 1), super::frame(8, 1));
    }
}
