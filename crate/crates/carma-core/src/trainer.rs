//! Optimization loop for the three model variants.
//!
//! `Original` pretrains briefly on a generic next-token objective over the
//! raw corpus text; `Ft` trains the cloze task with the regularizer weight
//! forced to zero; `Carma` adds the MI and stability losses through the
//! Eq.-8-style mix. A `Carma` run with `lambda = 0` takes exactly the `Ft`
//! code path, which is what makes the two trajectories bit-identical per
//! seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::carma::{self, CarmaConfig, CompositionGroups};
use crate::data::tokenizer::BOS;
use crate::data::{Dataset, SplitName};
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, PatchMap, TokenId, Transformer};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::stream_rng;

/// Training setup: untrained-on-task baseline, plain fine-tuning, or
/// fine-tuning with the CARMA regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Ft,
    Carma,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Ft => "ft",
            Variant::Carma => "carma",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "ft" => Ok(Variant::Ft),
            "carma" => Ok(Variant::Carma),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Scalar,
    /// Linear warmup length; scaled down to half the run when the run is
    /// shorter than two warmups.
    pub warmup_steps: usize,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub adam_epsilon: Scalar,
    /// Global-norm gradient clip.
    pub grad_clip: Scalar,
    pub carma: CarmaConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.006,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: 1.0,
            carma: CarmaConfig::default(),
            variant: Variant::Carma,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be > 0"));
        }
        self.carma.validate()
    }
}

/// One optimizer step's losses and wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_task: f64,
    pub l_mi: f64,
    pub l_stab: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
}

/// Full training trajectory: per-step records plus epoch validation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Steps whose batch produced no MI anchors.
    pub empty_anchor_steps: usize,
    /// Sum of per-step wall time (the optimization cost).
    pub train_wall_ms: f64,
    /// Whole-run wall time including validation passes.
    pub total_wall_ms: f64,
}

impl TrainLog {
    /// One JSON object per step, newline-delimited.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step record serializes"));
            out.push('\n');
        }
        out
    }
}

enum ItemKind {
    Cloze { target: TokenId },
    NextToken,
}

struct TrainItem {
    tokens: Vec<TokenId>,
    spans: Vec<(usize, usize)>,
    kind: ItemKind,
}

fn prepare_items(dataset: &Dataset, variant: Variant) -> Result<Vec<TrainItem>> {
    match variant {
        Variant::Original => dataset
            .corpus_lines()
            .iter()
            .map(|line| {
                let toks = dataset.tokenizer.tokenize(line)?;
                let mut tokens = Vec::with_capacity(toks.ids.len() + 1);
                tokens.push(BOS);
                tokens.extend(&toks.ids);
                Ok(TrainItem {
                    tokens,
                    spans: Vec::new(),
                    kind: ItemKind::NextToken,
                })
            })
            .collect(),
        Variant::Ft | Variant::Carma => dataset
            .split
            .train
            .iter()
            .map(|ex| {
                let enc = dataset.encode(ex)?;
                Ok(TrainItem {
                    tokens: enc.ids,
                    spans: enc.word_spans,
                    kind: ItemKind::Cloze { target: ex.target },
                })
            })
            .collect(),
    }
}

/// Exact-match accuracy (%) of greedy decoding over a split.
pub fn evaluate_accuracy(model: &Transformer, dataset: &Dataset, split: SplitName) -> Result<f64> {
    let examples = dataset.examples(split);
    if examples.is_empty() {
        return Err(Error::contract(format!("split {split} is empty")));
    }
    let vocab = model.config().vocab_size;
    let mut hits = 0usize;
    for ex in examples {
        let enc = dataset.encode(ex)?;
        let (logits, _) = model.forward(&enc.ids, &enc.word_spans, &PatchMap::new())?;
        let rows = logits.shape()[0];
        let last = &logits.values()[(rows - 1) * vocab..rows * vocab];
        if argmax_lowest(last) as TokenId == ex.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64 * 100.0)
}

/// Node count of one inference forward pass; architecture-determined, so FT
/// and CARMA checkpoints of the same shape must agree.
pub fn forward_op_count(model: &Transformer, tokens: &[TokenId]) -> Result<usize> {
    let tape = Tape::inference();
    let leaves = model.leaves(&tape)?;
    model.forward_on(&leaves, tokens, &[], &PatchMap::new())?;
    Ok(tape.node_count())
}

/// Trains `model` on `dataset` per `cfg`, returning the best-validation
/// checkpoint and the full log.
pub fn train(
    mut model: Transformer,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Transformer, TrainLog)> {
    cfg.validate()?;
    if dataset.split.train.is_empty() || dataset.split.validation.is_empty() {
        return Err(Error::contract("dataset splits must be nonempty"));
    }
    if model.config().vocab_size != dataset.vocab_size() {
        return Err(Error::contract(format!(
            "model vocab {} != tokenizer vocab {}",
            model.config().vocab_size,
            dataset.vocab_size()
        )));
    }

    let depth = model.config().n_layers;
    let mut ccfg = cfg.carma.clone();
    ccfg.seed = cfg.seed;
    if ccfg.layer_start > depth {
        return Err(Error::config(format!(
            "carma layer_start {} exceeds model depth {depth}",
            ccfg.layer_start
        )));
    }
    if ccfg.layer_end > depth {
        log::warn!(
            "carma layer_end {} clamped to model depth {depth}",
            ccfg.layer_end
        );
        ccfg.layer_end = depth;
    }
    let lambda = match cfg.variant {
        Variant::Original | Variant::Ft => 0.0,
        Variant::Carma => ccfg.lambda,
    };
    ccfg.lambda = lambda;
    let carma_active = lambda > 0.0;

    let items = prepare_items(dataset, cfg.variant)?;
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps.min(total_steps / 2);

    let mut shuffle_rng = stream_rng(cfg.seed, "epoch-shuffle");
    let mut neg_rng = stream_rng(cfg.seed, "mi-negatives");

    let mut adam_m: Vec<Vec<Scalar>> = model
        .params()
        .iter()
        .map(|(_, p)| vec![0.0; p.values.len()])
        .collect();
    let mut adam_v = adam_m.clone();

    let mut log = TrainLog::default();
    let run_start = Instant::now();
    let mut step = 0usize;
    let mut best: Option<(f64, Transformer)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let step_start = Instant::now();
            step += 1;

            let tape = Tape::new();
            let leaves = model.leaves(&tape)?;
            let mut answer_rows: Vec<Tensor> = Vec::new();
            let mut answer_targets: Vec<usize> = Vec::new();
            let mut traces = Vec::new();
            let mut groups = Vec::new();
            for &i in chunk {
                let item = &items[i];
                let (logits, trace) =
                    model.forward_on(&leaves, &item.tokens, &item.spans, &PatchMap::new())?;
                match item.kind {
                    ItemKind::Cloze { target } => {
                        let last = item.tokens.len() - 1;
                        answer_rows.push(logits.gather_rows(&[last])?);
                        answer_targets.push(target as usize);
                    }
                    ItemKind::NextToken => {
                        let n = item.tokens.len();
                        let rows: Vec<usize> = (0..n - 1).collect();
                        answer_rows.push(logits.gather_rows(&rows)?);
                        answer_targets.extend(item.tokens[1..].iter().map(|&t| t as usize));
                    }
                }
                if carma_active {
                    let g = CompositionGroups::from_spans(
                        &item.spans,
                        item.tokens.len(),
                        ccfg.max_negatives,
                        &mut neg_rng,
                    )?;
                    traces.push(trace);
                    groups.push(g);
                }
            }

            let task = Tensor::concat_rows(&answer_rows)?.cross_entropy(&answer_targets)?;
            let (total, l_mi, l_stab) = if carma_active {
                let pairs: Vec<(&crate::model::LayerTrace, &CompositionGroups)> =
                    traces.iter().zip(groups.iter()).collect();
                let mi = carma::mi_loss_batch(&pairs, &ccfg)?;
                if mi.anchor_count == 0 {
                    log.empty_anchor_steps += 1;
                }
                let trace_refs: Vec<&crate::model::LayerTrace> = traces.iter().collect();
                let stab = carma::stability_loss_batch(&trace_refs, &ccfg)?;
                let reg = carma::carma_loss(&mi.loss, &stab, &ccfg)?;
                let total = carma::total_loss(&task, &reg, &ccfg)?;
                (
                    total,
                    mi.loss.scalar_value()? as f64,
                    stab.scalar_value()? as f64,
                )
            } else {
                (task.clone(), 0.0, 0.0)
            };

            let l_total = total.scalar_value()?;
            if !l_total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("total loss = {l_total}"),
                });
            }

            let grads = tape.backward(&total)?;
            let leaf_tensors = leaves.all();
            let grad_vecs: Vec<Vec<Scalar>> =
                leaf_tensors.iter().map(|t| grads.get(t)).collect();

            let norm_sq: Scalar = grad_vecs
                .iter()
                .flat_map(|g| g.iter())
                .map(|&g| g * g)
                .sum();
            let norm = norm_sq.sqrt();
            let clip_scale = if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };

            let lr_t = if step <= warmup && warmup > 0 {
                cfg.learning_rate * step as Scalar / warmup as Scalar
            } else {
                cfg.learning_rate
            };
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for ((param, g), (m, v)) in model
                .params_mut()
                .into_iter()
                .zip(&grad_vecs)
                .zip(adam_m.iter_mut().zip(adam_v.iter_mut()))
            {
                for j in 0..param.values.len() {
                    let gj = g[j] * clip_scale;
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    param.values[j] -= lr_t * mhat / (vhat.sqrt() + cfg.adam_epsilon);
                }
            }

            let wall_ms = step_start.elapsed().as_secs_f64() * 1e3;
            log.train_wall_ms += wall_ms;
            log.steps.push(StepRecord {
                step,
                l_task: task.scalar_value()? as f64,
                l_mi,
                l_stab,
                l_total: l_total as f64,
                wall_ms,
            });
        }

        let val_accuracy = evaluate_accuracy(&model, dataset, SplitName::Validation)?;
        log.epochs.push(EpochRecord {
            epoch,
            val_accuracy,
        });
        if best
            .as_ref()
            .map(|(acc, _)| val_accuracy > *acc)
            .unwrap_or(true)
        {
            log.best_epoch = epoch;
            log.best_val_accuracy = val_accuracy;
            best = Some((val_accuracy, model.clone()));
        }
    }

    log.total_wall_ms = run_start.elapsed().as_secs_f64() * 1e3;
    // Cloze accuracy is not the pretraining objective, so the baseline keeps
    // its final weights; the task variants keep their best validation epoch.
    let trained = match cfg.variant {
        Variant::Original => model,
        Variant::Ft | Variant::Carma => best.expect("at least one epoch ran").1,
    };
    Ok((trained, log))
}

/// Training-time overhead of the regularized run over the plain one.
pub fn overhead_report(ft_log: &TrainLog, carma_log: &TrainLog) -> Result<f64> {
    if ft_log.train_wall_ms <= 0.0 || carma_log.train_wall_ms <= 0.0 {
        return Err(Error::contract("overhead_report: missing timing data"));
    }
    Ok(carma_log.train_wall_ms / ft_log.train_wall_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_idm;
    use crate::model::TransformerConfig;

    fn small_setup() -> (Transformer, Dataset) {
        let ds = gen_idm(3, 60).unwrap();
        let cfg = TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: ds.vocab_size(),
            max_seq: 32,
            activation: Default::default(),
        };
        (Transformer::new(cfg, 11).unwrap(), ds)
    }

    fn quick_cfg(variant: Variant, lambda: Scalar) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            warmup_steps: 2,
            variant,
            seed: 42,
            carma: CarmaConfig {
                lambda,
                layer_start: 1,
                layer_end: 1,
                ..CarmaConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn losses(log: &TrainLog) -> Vec<(f64, f64, f64, f64)> {
        log.steps
            .iter()
            .map(|s| (s.l_task, s.l_mi, s.l_stab, s.l_total))
            .collect()
    }

    #[test]
    fn lambda_zero_trajectory_equals_ft_baseline() {
        let (model, ds) = small_setup();
        let (m1, log_ft) = train(model.clone(), &ds, &quick_cfg(Variant::Ft, 0.7)).unwrap();
        let (m2, log_l0) = train(model, &ds, &quick_cfg(Variant::Carma, 0.0)).unwrap();
        assert_eq!(losses(&log_ft), losses(&log_l0));
        for (p1, p2) in m1.params().iter().zip(m2.params().iter()) {
            let a: Vec<_> = p1.1.values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<_> = p2.1.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "parameter {} diverged", p1.0);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (model, ds) = small_setup();
        let mut cfg = quick_cfg(Variant::Ft, 0.0);
        cfg.learning_rate = 0.0;
        let before: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|(_, p)| p.values.iter().map(|v| v.to_bits() as u64).collect())
            .collect();
        let (trained, _) = train(model, &ds, &cfg).unwrap();
        let after: Vec<Vec<u64>> = trained
            .params()
            .iter()
            .map(|(_, p)| p.values.iter().map(|v| v.to_bits() as u64).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (model, ds) = small_setup();
        let cfg = quick_cfg(Variant::Carma, 0.4);
        let (_, log1) = train(model.clone(), &ds, &cfg).unwrap();
        let (_, log2) = train(model, &ds, &cfg).unwrap();
        assert_eq!(losses(&log1), losses(&log2));
    }

    #[test]
    fn carma_steps_record_regularizer_losses() {
        let (model, ds) = small_setup();
        let (_, log) = train(model, &ds, &quick_cfg(Variant::Carma, 0.4)).unwrap();
        assert!(log.steps.iter().any(|s| s.l_mi != 0.0));
        assert!(log.steps.iter().all(|s| s.l_stab >= 0.0));
        // Multi-token content words exist in every batch, so anchors do too.
        assert_eq!(log.empty_anchor_steps, 0);
    }

    #[test]
    fn original_variant_trains_on_next_token_objective() {
        let (model, ds) = small_setup();
        let (_, log) = train(model, &ds, &quick_cfg(Variant::Original, 0.9)).unwrap();
        // The regularizers never run for the baseline.
        assert!(log.steps.iter().all(|s| s.l_mi == 0.0 && s.l_stab == 0.0));
        assert!(!log.steps.is_empty());
    }

    #[test]
    fn nan_parameters_abort_with_an_error() {
        let (mut model, ds) = small_setup();
        model.params_mut()[2].values[0] = Scalar::NAN;
        assert!(train(model, &ds, &quick_cfg(Variant::Ft, 0.0)).is_err());
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (_, ds) = small_setup();
        let cfg = TransformerConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 1,
            d_mlp: 8,
            vocab_size: 7,
            max_seq: 32,
            activation: Default::default(),
        };
        let model = Transformer::new(cfg, 1).unwrap();
        assert!(train(model, &ds, &quick_cfg(Variant::Ft, 0.0)).is_err());
    }

    #[test]
    fn overhead_report_requires_timing() {
        let empty = TrainLog::default();
        assert!(overhead_report(&empty, &empty).is_err());
        let mut a = TrainLog::default();
        a.train_wall_ms = 100.0;
        let mut b = TrainLog::default();
        b.train_wall_ms = 150.0;
        assert!((overhead_report(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(overhead_report(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn forward_op_count_is_architecture_determined() {
        let (model, _) = small_setup();
        let a = forward_op_count(&model, &[1, 2, 3, 4]).unwrap();
        let mut clone = model.clone();
        crate::model::randomize_params(&mut clone, 9, 0.1);
        let b = forward_op_count(&clone, &[5, 6, 7, 8]).unwrap();
        assert_eq!(a, b);
    }
}
