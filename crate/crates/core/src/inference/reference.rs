//! Seeded synthetic weights standing in for a real checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ModelConfig, ModelManifest, Tensor};

/// Builds a canonical model with deterministic pseudo-random weights.
///
/// The generator is ChaCha8 seeded with `seed`, drawing tensors in manifest
/// order. Matrices of shape `[out, in]` are uniform on
/// `[-1/sqrt(in), 1/sqrt(in))`; norm weights are `1 + U[-0.1, 0.1)`.
pub fn build_reference_model(cfg: &ModelConfig, seed: u64) -> Result<(Vec<Tensor>, ModelManifest)> {
    let manifest = ModelManifest::for_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = manifest
        .tensors
        .iter()
        .map(|rec| {
            let n = rec.numel();
            let data: Vec<f32> = if rec.dims.len() == 1 {
                (0..n).map(|_| 1.0 + rng.random_range(-0.1f32..0.1)).collect()
            } else {
                let bound = 1.0 / (rec.dims[1] as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            Tensor::new(rec.name.clone(), rec.dims.clone(), data)
        })
        .collect::<Result<_>>()?;
    Ok((tensors, manifest))
}
