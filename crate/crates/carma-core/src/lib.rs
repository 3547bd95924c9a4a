//! Desk-scale lab for CARMA: contrastive mutual-information alignment plus
//! layer-wise stability regularization on a small decoder-only transformer.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`] — dense tensors with a reverse-mode gradient tape
//! - [`model`] — the transformer, layer traces, and activation patching
//! - [`carma`] — the MI / stability losses and their combination
//! - [`data`] — synthetic task generators and the span-aware tokenizer
//! - [`interventions`] — constituent-aware pooling and synonym replacement
//! - [`metrics`] — accuracy, ConsistSyn, CV, NI
//! - [`trainer`] — the optimization loop over the three model variants
//!
//! Everything is deterministic given a seed: generators, training, and the
//! evaluation harnesses all derive their RNG streams from explicit seeds.

pub mod carma;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use carma::{CarmaConfig, CompositionGroups};
pub use error::{Error, Result};
pub use model::{LayerTrace, Transformer, TransformerConfig};
pub use tensor::{Scalar, Tape, Tensor};
pub use trainer::{TrainConfig, Variant};
