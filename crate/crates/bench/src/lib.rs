//! Fixtures shared by the benchmarks.

use hflow_core::training::data::ImagePool;
use hflow_core::{FeatureMap, ImageSize};

/// Seeded synthetic scene of the given square size.
pub fn scene(size: usize, seed: u64) -> FeatureMap<f32> {
    ImagePool::synthetic_source(1, ImageSize::square(size), seed).images.remove(0)
}

/// Seeded synthetic style image of the given square size.
pub fn style(size: usize, seed: u64) -> FeatureMap<f32> {
    ImagePool::synthetic_target(1, ImageSize::square(size), seed).images.remove(0)
}
