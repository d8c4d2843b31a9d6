//! Shared fixtures for the criterion benchmarks.

use pmud_core::config::ModelConfig;
use pmud_core::ndarray::Array2;
use pmud_core::patching::{patchify, PatchGridSpec};
use pmud_core::seeds;
use pmud_core::rand::Rng as _;

/// Toy-profile patch matrix with pseudo-random pixels.
pub fn toy_patches(cfg: &ModelConfig, seed: u64) -> Array2<f64> {
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size).unwrap();
    let mut rng = seeds::stream(seed);
    let img = pmud_core::ndarray::Array3::from_shape_fn(
        (cfg.image_size, cfg.image_size, 3),
        |_| rng.random::<f64>(),
    );
    patchify(&img, &spec).unwrap()
}
