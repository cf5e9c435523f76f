//! Fixtures shared by the benchmarks.

use cocolora_core::data::generate_synthetic;
use cocolora_core::training::perturb_parameters;
use cocolora_core::{Dataset, Family, Model, ModelConfig, SyntheticSpec};

/// A model of `family` at the default size on 16-dimensional inputs, moved
/// away from its `B = 0` initialization.
pub fn model(family: Family) -> Model {
    let config = ModelConfig {
        family,
        width: 16,
        audio_dim: 16,
        ..ModelConfig::default()
    };
    let mut m = Model::new(config, 0).expect("valid config");
    perturb_parameters(&mut m, 0.05, 0);
    m
}

/// `n` samples of the default synthetic task.
pub fn data(n: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_samples: n,
        ..SyntheticSpec::default()
    })
    .expect("valid spec")
}
