//! Shared fixtures for the criterion benchmarks.

use carma_core::data::{gen_idm, Dataset};
use carma_core::model::{Transformer, TransformerConfig};
use carma_core::trainer::{TrainConfig, Variant};
use carma_core::CarmaConfig;

/// Desk-scale IDM dataset used by every benchmark.
pub fn bench_dataset() -> Dataset {
    gen_idm(1, 300).expect("benchmark dataset")
}

pub fn bench_model(ds: &Dataset) -> Transformer {
    let cfg = TransformerConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_mlp: 128,
        vocab_size: ds.vocab_size(),
        max_seq: 32,
        activation: Default::default(),
    };
    Transformer::new(cfg, 1).expect("benchmark model")
}

/// One-epoch training config for step-cost measurements.
pub fn bench_train_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        variant,
        seed: 1,
        carma: CarmaConfig {
            lambda: 0.4,
            gamma: 0.05,
            eta: 0.95,
            layer_start: 1,
            layer_end: 2,
            average_anchors: true,
            ..CarmaConfig::default()
        },
        ..TrainConfig::default()
    }
}
