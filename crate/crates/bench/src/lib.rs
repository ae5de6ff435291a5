//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tyrist_core::detect::Detection;
use tyrist_core::geometry::BBox;
use tyrist_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Small boxes scattered over a `size` x `size` image.
pub fn random_boxes(count: usize, size: f64, seed: u64) -> Vec<BBox> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            BBox::new(
                r.random_range(0.0..size),
                r.random_range(0.0..size),
                r.random_range(2.0..12.0),
                r.random_range(2.0..12.0),
            )
        })
        .collect()
}

/// Detections on one image, clustered so NMS has overlaps to suppress.
pub fn random_detections(count: usize, seed: u64) -> Vec<Detection> {
    let mut r = rng(seed);
    let centres = random_boxes(count / 8 + 1, 256.0, seed ^ 1);
    (0..count)
        .map(|i| {
            let c = centres[i % centres.len()];
            Detection {
                image_id: 0,
                class_id: 0,
                score: r.random_range(0.0..1.0),
                bbox: c.shifted(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)),
            }
        })
        .collect()
}
