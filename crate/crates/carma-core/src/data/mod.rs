//! Synthetic desk-scale tasks: inverse definition modelling (IDM) and
//! sentiment classification (SC), both framed as single-token cloze
//! prediction.
//!
//! Both generators are pure functions of `(seed, n_items)`: prompts, splits,
//! the vocabulary, and the synonym lexicon all regenerate bit-identically.
//! The test split is compositional — attribute–concept pairs (IDM) and
//! modifier–adjective pairs (SC) that never occur in train.

pub mod gen;
pub mod io;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::SynonymLexicon;
use crate::model::TokenId;
use tokenizer::{Tokenized, Tokenizer};

pub use gen::{gen_idm, gen_sc};

/// Which downstream task an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Idm,
    Sc,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Idm => "idm",
            Task::Sc => "sc",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idm" => Ok(Task::Idm),
            "sc" => Ok(Task::Sc),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

/// One cloze item: a prompt whose answer is a single vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: String,
    pub target: TokenId,
    pub target_text: String,
    pub task: Task,
    /// Token range per surface word of `prompt` (unshifted; see
    /// [`Tokenizer::encode_prompt`] for the model-input layout).
    pub word_spans: Vec<(usize, usize)>,
    /// Word positions with known lexicon substitutes.
    pub synonym_slots: Vec<usize>,
}

/// Train/validation/test partition, disjoint by prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub generator_seed: u64,
}

/// Named split selector used by the evaluation harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

/// A generated task: examples plus the tokenizer and synonym lexicon they
/// were built with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub generator_seed: u64,
    pub n_items: usize,
    pub tokenizer: Tokenizer,
    pub lexicon: SynonymLexicon,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    /// Model-input encoding of an example's prompt.
    pub fn encode(&self, ex: &Example) -> Result<Tokenized> {
        self.tokenizer.encode_prompt(&ex.prompt)
    }

    pub fn examples(&self, split: SplitName) -> &[Example] {
        match split {
            SplitName::Train => &self.split.train,
            SplitName::Validation => &self.split.validation,
            SplitName::Test => &self.split.test,
        }
    }

    /// Distinct answer tokens across all splits.
    pub fn answer_vocab(&self) -> std::collections::BTreeSet<TokenId> {
        self.split
            .train
            .iter()
            .chain(&self.split.validation)
            .chain(&self.split.test)
            .map(|e| e.target)
            .collect()
    }

    /// Raw text lines for generic language-model pretraining: prompt plus
    /// answer, no task formatting.
    pub fn corpus_lines(&self) -> Vec<String> {
        self.split
            .train
            .iter()
            .map(|e| format!("{} {}", e.prompt, e.target_text))
            .collect()
    }

    /// Regenerates from `(task, seed, n_items)`.
    pub fn regenerate(task: Task, seed: u64, n_items: usize) -> Result<Dataset> {
        match task {
            Task::Idm => gen_idm(seed, n_items),
            Task::Sc => gen_sc(seed, n_items),
        }
    }
}
