//! Seeded fixtures shared by the benchmarks in `benches/`.

use deepswir::{Manifest, Raster, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` with the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Random 10-bit band as `f64`.
pub fn random_band(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..=1023) as f64).collect()
}

/// Random three-band G/R/NIR tile.
pub fn random_tile(height: usize, width: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = Manifest::new(width, height, &["G", "R", "NIR"]);
    let data = (0..3 * width * height).map(|_| rng.gen_range(0..=1023)).collect();
    Raster::new(meta, data).expect("manifest matches data")
}
