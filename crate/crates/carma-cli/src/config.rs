//! Run configuration: one JSON file, dotted-key overrides, strict schema.

use std::path::Path;

use anyhow::{bail, Context, Result};
use carma_core::data::SplitName;
use carma_core::metrics::CvEstimator;
use carma_core::model::TransformerConfig;
use carma_core::trainer::TrainConfig;
use carma_core::{CarmaConfig, Variant};
use serde::{Deserialize, Serialize};

/// Architecture block of the run config; the vocabulary size always comes
/// from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_mlp: 128,
            max_seq: 32,
        }
    }
}

impl ModelSpec {
    pub fn to_transformer_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq: self.max_seq,
            activation: Default::default(),
        }
    }
}

/// Optimization block; `pretrain_epochs > 0` warm-starts the task variants
/// from a generic language-model phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub grad_clip: f64,
    pub pretrain_epochs: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.006,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: 1.0,
            pretrain_epochs: 0,
        }
    }
}

/// Evaluation defaults for the intervention commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Split the interventions score against. The compositional test split
    /// holds out answer tokens entirely, so consistency metrics default to
    /// validation, where trained models have measurable competence.
    pub synonym_split: SplitName,
    pub cap_split: SplitName,
    pub rates: Vec<f64>,
    pub eval_seeds: Vec<u64>,
    pub cv_estimator: CvEstimator,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            synonym_split: SplitName::Validation,
            cap_split: SplitName::Test,
            rates: vec![0.25, 0.40],
            eval_seeds: vec![1, 2, 3, 4, 5],
            cv_estimator: CvEstimator::Population,
        }
    }
}

fn default_task() -> String {
    "idm".to_string()
}

/// Dataset block, mirrored in `gen` flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    #[serde(default = "default_task")]
    pub task: String,
    pub seed: u64,
    pub n_items: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            task: default_task(),
            seed: 1,
            n_items: 300,
        }
    }
}

/// The whole static run config.
///
/// The CARMA block defaults here are the desk-scale operating point (light
/// MI weight, heavy stability weight, anchor averaging); they differ from
/// the library defaults on purpose and can be overridden per run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub carma: CarmaConfig,
    pub eval: EvalSpec,
    pub data: DataSpec,
}

impl RunConfig {
    /// Desk defaults tuned for the bundled synthetic tasks.
    pub fn desk_default() -> Self {
        RunConfig {
            carma: CarmaConfig {
                lambda: 0.4,
                gamma: 0.05,
                eta: 0.95,
                tau: 0.1,
                layer_start: 1,
                layer_end: 2,
                average_anchors: true,
                ..CarmaConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn to_train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            warmup_steps: self.train.warmup_steps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_epsilon: self.train.adam_epsilon,
            grad_clip: self.train.grad_clip,
            carma: self.carma.clone(),
            variant,
            seed,
        }
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(carma_core::data::io::sha256_hex(
            self.canonical_json()?.as_bytes(),
        ))
    }
}

/// Applies a `dotted.key=value` override to a JSON tree. The key must
/// already exist: unknown keys are rejected, matching the schema policy.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let mut node = &mut *tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .with_context(|| format!("override {path:?}: {part:?} is not an object"))?;
        if !map.contains_key(*part) {
            bail!("override {path:?}: unknown key {part:?}");
        }
        if i + 1 == parts.len() {
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("key checked above");
    }
    bail!("empty override path")
}

/// Loads the config (or the desk default when no path is given) and applies
/// overrides; unknown keys anywhere are an error.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::desk_default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut tree = serde_json::to_value(&base)?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let merged: RunConfig = serde_json::from_value(tree).context("applying overrides")?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_change_nested_values() {
        let cfg = load_config(None, &["carma.lambda=0.25".into(), "train.epochs=7".into()])
            .unwrap();
        assert_eq!(cfg.carma.lambda, 0.25);
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        assert!(load_config(None, &["carma.lambdaa=0.25".into()]).is_err());
        assert!(load_config(None, &["nope.x=1".into()]).is_err());
    }

    #[test]
    fn string_values_parse_without_quotes() {
        let cfg = load_config(None, &["data.task=sc".into()]).unwrap();
        assert_eq!(cfg.data.task, "sc");
    }

    #[test]
    fn config_hash_is_stable() {
        let a = RunConfig::desk_default().hash().unwrap();
        let b = RunConfig::desk_default().hash().unwrap();
        assert_eq!(a, b);
    }
}
