//! End-to-end training checks on the toy tasks.

use carma_core::data::{gen_idm, SplitName};
use carma_core::model::{randomize_params, Transformer, TransformerConfig};
use carma_core::trainer::{evaluate_accuracy, train, TrainConfig, Variant};
use carma_core::CarmaConfig;

fn desk_model_cfg(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_mlp: 128,
        vocab_size: vocab,
        max_seq: 32,
        activation: Default::default(),
    }
}

fn train_cfg(variant: Variant, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        warmup_steps: 500,
        variant,
        seed,
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

#[test]
fn ft_training_beats_five_times_chance_on_idm() {
    let ds = gen_idm(7, 240).unwrap();
    let model = Transformer::new(desk_model_cfg(ds.vocab_size()), 7).unwrap();

    // Empirical chance level: a random-parameter model of the same shape.
    let mut random = model.clone();
    randomize_params(&mut random, 123, 0.05);
    let chance = evaluate_accuracy(&random, &ds, SplitName::Validation).unwrap();

    let (trained, log) = train(model, &ds, &train_cfg(Variant::Ft, 7, 15)).unwrap();
    let val = evaluate_accuracy(&trained, &ds, SplitName::Validation).unwrap();
    eprintln!(
        "idm ft: val={val:.1}% best={:.1}% chance={chance:.1}% steps={}",
        log.best_val_accuracy,
        log.steps.len(),
    );
    let floor = (chance * 5.0).max(5.0 * 100.0 / ds.vocab_size() as f64);
    assert!(
        val > floor,
        "validation accuracy {val:.2}% not above 5x chance ({floor:.2}%)"
    );
}

#[test]
fn carma_training_learns_and_costs_more_time() {
    let ds = gen_idm(11, 240).unwrap();
    let model = Transformer::new(desk_model_cfg(ds.vocab_size()), 11).unwrap();
    let (_, ft_log) = train(model.clone(), &ds, &train_cfg(Variant::Ft, 11, 10)).unwrap();
    let (carma_model, carma_log) =
        train(model, &ds, &train_cfg(Variant::Carma, 11, 10)).unwrap();
    let val = evaluate_accuracy(&carma_model, &ds, SplitName::Validation).unwrap();
    let ratio = carma_log.train_wall_ms / ft_log.train_wall_ms;
    eprintln!("carma: val={val:.1}% overhead ratio={ratio:.2}");
    assert!(ratio > 1.0, "regularized step should cost more: {ratio}");
    assert!(val > 10.0, "carma variant failed to learn: {val:.2}%");
}
