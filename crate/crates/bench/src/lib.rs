//! Shared fixtures for the benchmarks.

use sgdiff::model::{Example, ModelConfig};
use sgdiff::synthdata::{generate_dataset, SceneParams};
use sgdiff::trainer::{TrainConfig, Trainer};

/// `n` default-world examples.
pub fn examples(n: usize, seed: u64) -> Vec<Example> {
    generate_dataset(&SceneParams::default(), seed, n)
        .expect("dataset")
        .iter()
        .map(|s| Example::from_sample(s, 0.5).expect("example"))
        .collect()
}

/// Untrained default-size model.
pub fn trainer() -> Trainer<f32> {
    Trainer::new(ModelConfig::default(), TrainConfig::desk()).expect("trainer")
}
