//! Fixtures shared by the benchmarks.

use cgrow_core::data::{heldout_batch, Batch, DataConfig};
use cgrow_core::numerics::{Rng, Tensor};
use cgrow_core::transformer::{FfnMode, ModelConfig, Params};

/// Desk-scale model with `layers` layers and the given FFN mode and pooling.
pub fn desk_model(layers: usize, ffn: FfnMode, pool_k: usize) -> ModelConfig {
    ModelConfig {
        layers,
        ffn,
        pool_k,
        ..ModelConfig::desk()
    }
}

pub fn desk_params(model: &ModelConfig) -> Params {
    Params::init(model, &mut Rng::new(0)).expect("desk config is valid")
}

/// `count` masked desk-scale sequences.
pub fn desk_batch(count: usize) -> Batch {
    heldout_batch(&DataConfig::desk(), count, &Rng::new(1)).expect("desk data is valid")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape matches data")
}
