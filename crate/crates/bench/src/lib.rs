//! Criterion micro-benchmarks live in `benches/`. This crate only provides
//! shared fixtures.

use sgmoe_core::depth::DepthImage;
use sgmoe_core::{Batch, Rng};

/// Random observations in `[-1, 1]`.
pub fn observations(batch: usize, dim: usize, seed: u64) -> Batch<f32> {
    Batch::uniform(batch, dim, -1.0, 1.0, &mut Rng::new(seed))
}

/// A 160x120 raw depth frame: a tilted floor with a box in front of it.
pub fn depth_frame() -> DepthImage {
    let mut img = DepthImage::filled(160, 120, 0.0);
    for row in 0..120 {
        for col in 0..160 {
            let floor = 0.5 + 2.8 * (1.0 - row as f32 / 120.0);
            let boxed = (60..100).contains(&col) && (40..80).contains(&row);
            img.set(col, row, if boxed { 0.9 } else { floor });
        }
    }
    img
}
