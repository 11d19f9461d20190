//! Fixtures shared by the kernel benchmarks.

use heartseg::model::{build_model, ArchitectureConfig, ModelParams};
use heartseg::rng::rng_from_seed;
use heartseg::tensor::Grid;
use heartseg::volio::{SegmentationMask, Volume3D};
use rand::Rng;

pub fn random_grid(channels: usize, dims: [usize; 3], seed: u64) -> Grid<f32> {
    let mut rng = rng_from_seed(seed);
    let n = channels * dims.iter().product::<usize>();
    Grid::from_vec(channels, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Two overlapping random blobs of class 1.
pub fn blob_masks(dims: [usize; 3]) -> (SegmentationMask, SegmentationMask) {
    let blob = |c: [f64; 3], r: f64| {
        let mut labels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                    labels.push(u8::from(d.iter().map(|v| v * v).sum::<f64>() < r * r));
                }
            }
        }
        SegmentationMask::new(labels, dims, [2.0; 3]).expect("valid mask")
    };
    let h = dims.map(|d| d as f64 / 2.0);
    (blob(h, h[0] / 2.0), blob([h[0] + 2.0, h[1], h[2] - 1.0], h[0] / 2.2))
}

pub fn desk_model() -> ModelParams {
    build_model(&ArchitectureConfig::default(), &mut rng_from_seed(0)).expect("desk model")
}

pub fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
    let g = random_grid(1, dims, seed);
    Volume3D::new(g.data, dims, [2.0; 3], Default::default(), "bench").expect("volume")
}
