//! Robustness probes: constituent-aware pooling over hidden states and
//! seed-controlled synonym replacement over prompts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::Tokenizer;
use crate::data::{Dataset, Example, SplitName};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{argmax_lowest, LayerTrace, PatchMap, PatchTensor, Transformer};
use crate::tensor::Scalar;
use crate::util::{derive_seed_indexed, stream_rng};

/// How a word's token vectors collapse to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
    Sum,
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Mean => "mean",
            PoolMode::Max => "max",
            PoolMode::Sum => "sum",
        })
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "max" => Ok(PoolMode::Max),
            "sum" => Ok(PoolMode::Sum),
            other => Err(Error::config(format!("unknown pool mode {other:?}"))),
        }
    }
}

impl PoolMode {
    pub const ALL: [PoolMode; 3] = [PoolMode::Mean, PoolMode::Max, PoolMode::Sum];
}

/// Ranked slot-preserving substitutes per surface word.
///
/// Substitutes come from the task generator, so every replacement keeps the
/// word's semantic slot (an attribute stays the same attribute, a polarity
/// word keeps its polarity) and never equals the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymLexicon {
    map: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl SynonymLexicon {
    pub fn new(map: BTreeMap<String, Vec<String>>, seed: u64) -> Result<Self> {
        for (word, subs) in &map {
            if subs.is_empty() {
                return Err(Error::config(format!("word {word:?} has no substitutes")));
            }
            if subs.iter().any(|s| s == word) {
                return Err(Error::config(format!(
                    "word {word:?} lists itself as a substitute"
                )));
            }
        }
        Ok(SynonymLexicon { map, seed })
    }

    /// Test-mode lexicon where every substitute equals the original word;
    /// perturbation with it is a no-op, which pins ConsistSyn at 100.
    pub fn identity_for_tests<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let map = words
            .into_iter()
            .map(|w| (w.to_string(), vec![w.to_string()]))
            .collect();
        SynonymLexicon { map, seed: 0 }
    }

    pub fn substitutes(&self, word: &str) -> Option<&[String]> {
        self.map.get(word).map(|v| v.as_slice())
    }

    /// Top-ranked substitute.
    pub fn top(&self, word: &str) -> Option<&str> {
        self.map.get(word).and_then(|v| v.first()).map(|s| s.as_str())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Collapses each word span of `trace.hidden[layer]` to one vector.
///
/// Positions outside every span (BOS, SEP) pass through untouched, so the
/// pooled sequence is `#words + #specials` long. Returns the patch and the
/// word spans of the pooled sequence.
pub fn cap_pool(
    trace: &LayerTrace,
    layer: usize,
    mode: PoolMode,
) -> Result<(PatchTensor, Vec<(usize, usize)>)> {
    if layer >= trace.hidden.len() {
        return Err(Error::IndexOutOfRange {
            what: "cap_pool layer",
            index: layer,
            bound: trace.hidden.len(),
        });
    }
    if trace.word_spans.is_empty() {
        return Err(Error::contract("cap_pool: trace has no word spans"));
    }
    let hidden = &trace.hidden[layer];
    let &[seq, d] = hidden.shape() else {
        return Err(Error::contract("cap_pool: hidden state is not 2-D"));
    };
    let values = hidden.values();
    for &(s, e) in &trace.word_spans {
        if s >= e {
            return Err(Error::contract(format!("empty word span ({s}, {e})")));
        }
        if e > seq {
            return Err(Error::IndexOutOfRange {
                what: "word span end",
                index: e,
                bound: seq,
            });
        }
    }

    let mut out: Vec<Scalar> = Vec::with_capacity(seq * d);
    let mut new_spans = Vec::with_capacity(trace.word_spans.len());
    let mut span_iter = trace.word_spans.iter().peekable();
    let mut pos = 0;
    let mut out_rows = 0;
    while pos < seq {
        match span_iter.peek() {
            Some(&&(s, e)) if s == pos => {
                let mut pooled = vec![0.0 as Scalar; d];
                match mode {
                    PoolMode::Mean | PoolMode::Sum => {
                        for r in s..e {
                            for j in 0..d {
                                pooled[j] += values[r * d + j];
                            }
                        }
                        if mode == PoolMode::Mean {
                            let inv = 1.0 / (e - s) as Scalar;
                            pooled.iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                    PoolMode::Max => {
                        pooled.copy_from_slice(&values[s * d..(s + 1) * d]);
                        for r in (s + 1)..e {
                            for j in 0..d {
                                pooled[j] = pooled[j].max(values[r * d + j]);
                            }
                        }
                    }
                }
                out.extend_from_slice(&pooled);
                new_spans.push((out_rows, out_rows + 1));
                out_rows += 1;
                pos = e;
                span_iter.next();
            }
            _ => {
                out.extend_from_slice(&values[pos * d..(pos + 1) * d]);
                out_rows += 1;
                pos += 1;
            }
        }
    }
    Ok((
        PatchTensor {
            rows: out_rows,
            values: out,
        },
        new_spans,
    ))
}

/// Accuracy of one pooled-patch evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CapEvalResult {
    pub accuracy: f64,
    /// Normalized layer position `k / L` for cross-model comparison.
    pub layer_frac: f64,
    pub n_examples: usize,
}

/// Pools at `layer`, patches, resumes the forward pass, and scores exact
/// match over the chosen split.
pub fn run_cap_eval(
    model: &Transformer,
    dataset: &Dataset,
    split: SplitName,
    layer: usize,
    mode: PoolMode,
) -> Result<CapEvalResult> {
    let n_layers = model.config().n_layers;
    if layer == 0 || layer > n_layers {
        return Err(Error::contract(format!(
            "cap evaluation layer {layer} outside 1..={n_layers}"
        )));
    }
    let examples = dataset.examples(split);
    if examples.is_empty() {
        return Err(Error::contract(format!("split {split} is empty")));
    }
    let vocab = model.config().vocab_size;
    let mut preds = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = dataset.encode(ex)?;
        let (_, trace) = model.forward(&enc.ids, &enc.word_spans, &PatchMap::new())?;
        let (patch, _) = cap_pool(&trace, layer, mode)?;
        let mut patches = PatchMap::new();
        patches.insert(layer, patch);
        let (logits, _) = model.forward(&enc.ids, &enc.word_spans, &patches)?;
        let rows = logits.shape()[0];
        let last = &logits.values()[(rows - 1) * vocab..rows * vocab];
        preds.push(argmax_lowest(last) as u32);
        targets.push(ex.target);
    }
    Ok(CapEvalResult {
        accuracy: metrics::accuracy(&preds, &targets)?,
        layer_frac: layer as f64 / n_layers as f64,
        n_examples: examples.len(),
    })
}

/// Whether a perturbation actually changed anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaceOutcome {
    Replaced(usize),
    NoEligibleWords,
}

/// Replaces `ceil(rate * |eligible|)` eligible words with their top-ranked
/// substitutes. The target, word count, and all other words are untouched.
pub fn replace_synonyms(
    ex: &Example,
    lexicon: &SynonymLexicon,
    tokenizer: &Tokenizer,
    rate: f64,
    seed: u64,
) -> Result<(Example, ReplaceOutcome)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!("replacement rate {rate} not in (0, 1]")));
    }
    let mut words: Vec<String> = ex.prompt.split(' ').map(|s| s.to_string()).collect();
    let eligible: Vec<usize> = ex
        .synonym_slots
        .iter()
        .copied()
        .filter(|&i| i < words.len() && lexicon.top(&words[i]).is_some())
        .collect();
    if eligible.is_empty() {
        return Ok((ex.clone(), ReplaceOutcome::NoEligibleWords));
    }
    let count = ((rate * eligible.len() as f64).ceil() as usize).min(eligible.len());
    let mut order = eligible;
    order.shuffle(&mut stream_rng(seed, "synonym-pick"));
    let chosen = &order[..count];
    for &i in chosen {
        let sub = lexicon
            .top(&words[i])
            .expect("eligibility checked above")
            .to_string();
        words[i] = sub;
    }
    let prompt = words.join(" ");
    let toks = tokenizer.tokenize(&prompt)?;
    Ok((
        Example {
            prompt,
            target: ex.target,
            target_text: ex.target_text.clone(),
            task: ex.task,
            word_spans: toks.word_spans,
            synonym_slots: ex.synonym_slots.clone(),
        },
        ReplaceOutcome::Replaced(count),
    ))
}

/// Per-seed ConsistSyn under synonym replacement.
///
/// For each seed: find the correct-before set on clean prompts, perturb
/// those examples, and measure how many stay correct. `None` entries mark
/// seeds where nothing was correct before (undefined ConsistSyn). Five or
/// more seeds are expected for CV aggregation.
pub fn run_synonym_eval(
    model: &Transformer,
    dataset: &Dataset,
    split: SplitName,
    rate: f64,
    seeds: &[u64],
) -> Result<Vec<Option<f64>>> {
    if seeds.is_empty() {
        return Err(Error::contract("run_synonym_eval: empty seed list"));
    }
    let examples = dataset.examples(split);
    if examples.is_empty() {
        return Err(Error::contract(format!("split {split} is empty")));
    }

    let correct_before: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| {
            let enc = dataset.encode(ex).ok()?;
            let pred = model.generate_next(&enc.ids).ok()?;
            (pred == ex.target).then_some(i)
        })
        .collect();

    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        if correct_before.is_empty() {
            out.push(None);
            continue;
        }
        let mut correct_after = 0usize;
        for &i in &correct_before {
            let ex_seed = derive_seed_indexed(seed, "synonym-example", i as u64);
            let (perturbed, _) =
                replace_synonyms(&examples[i], &dataset.lexicon, &dataset.tokenizer, rate, ex_seed)?;
            let enc = dataset.encode(&perturbed)?;
            if model.generate_next(&enc.ids)? == perturbed.target {
                correct_after += 1;
            }
        }
        out.push(metrics::consist_syn(correct_before.len(), correct_after));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_idm;
    use crate::model::TransformerConfig;
    use crate::tensor::Tape;

    fn trace_for(values: Vec<Scalar>, rows: usize, d: usize, spans: Vec<(usize, usize)>) -> LayerTrace {
        let tape = Tape::inference();
        let h = tape.leaf(values, vec![rows, d]).unwrap();
        LayerTrace {
            hidden: vec![h],
            attn_out: vec![],
            mlp_out: vec![],
            word_spans: spans,
        }
    }

    #[test]
    fn pooling_definitions_on_a_two_token_word() {
        // Rows [1,2] and [3,4] pooled: sum [4,6], mean [2,3], max [3,4].
        let spans = vec![(0, 2)];
        for (mode, expect) in [
            (PoolMode::Sum, vec![4.0, 6.0]),
            (PoolMode::Mean, vec![2.0, 3.0]),
            (PoolMode::Max, vec![3.0, 4.0]),
        ] {
            let trace = trace_for(vec![1.0, 2.0, 3.0, 4.0], 2, 2, spans.clone());
            let (patch, new_spans) = cap_pool(&trace, 0, mode).unwrap();
            assert_eq!(patch.rows, 1);
            assert_eq!(patch.values, expect, "{mode:?}");
            assert_eq!(new_spans, vec![(0, 1)]);
        }
    }

    #[test]
    fn singleton_spans_pass_through_unchanged() {
        let trace = trace_for(vec![5.0, -1.0, 2.0, 7.0], 2, 2, vec![(0, 1), (1, 2)]);
        for mode in PoolMode::ALL {
            let (patch, _) = cap_pool(&trace, 0, mode).unwrap();
            assert_eq!(patch.values, vec![5.0, -1.0, 2.0, 7.0]);
        }
    }

    #[test]
    fn mean_of_identical_vectors_is_that_vector() {
        let trace = trace_for(vec![0.5, 0.25, 0.5, 0.25], 2, 2, vec![(0, 2)]);
        let (patch, _) = cap_pool(&trace, 0, PoolMode::Mean).unwrap();
        assert_eq!(patch.values, vec![0.5, 0.25]);
    }

    #[test]
    fn specials_outside_spans_are_preserved() {
        // Row 0 (BOS) and row 3 (SEP) are untouched; rows 1-2 pool to one.
        let trace = trace_for(
            vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0, 8.0, 8.0],
            4,
            2,
            vec![(1, 3)],
        );
        let (patch, spans) = cap_pool(&trace, 0, PoolMode::Sum).unwrap();
        assert_eq!(patch.rows, 3);
        assert_eq!(patch.values, vec![9.0, 9.0, 4.0, 6.0, 8.0, 8.0]);
        assert_eq!(spans, vec![(1, 2)]);
    }

    #[test]
    fn pooling_commutes_with_word_order() {
        let spans = vec![(0, 2), (2, 3)];
        let trace = trace_for(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0], 3, 2, spans);
        let (a, _) = cap_pool(&trace, 0, PoolMode::Mean).unwrap();
        let swapped = trace_for(
            vec![10.0, 20.0, 1.0, 2.0, 3.0, 4.0],
            3,
            2,
            vec![(0, 1), (1, 3)],
        );
        let (b, _) = cap_pool(&swapped, 0, PoolMode::Mean).unwrap();
        assert_eq!(&a.values[0..2], &b.values[2..4]);
        assert_eq!(&a.values[2..4], &b.values[0..2]);
    }

    #[test]
    fn mean_le_max_and_sum_is_mean_times_count() {
        let spans = vec![(0, 3)];
        let vals = vec![1.0, -2.0, 0.5, 4.0, -3.0, 1.5];
        let trace = trace_for(vals.clone(), 3, 2, spans.clone());
        let (mean, _) = cap_pool(&trace, 0, PoolMode::Mean).unwrap();
        let trace2 = trace_for(vals.clone(), 3, 2, spans.clone());
        let (max, _) = cap_pool(&trace2, 0, PoolMode::Max).unwrap();
        let trace3 = trace_for(vals, 3, 2, spans);
        let (sum, _) = cap_pool(&trace3, 0, PoolMode::Sum).unwrap();
        for j in 0..2 {
            assert!(mean.values[j] <= max.values[j]);
            assert!((sum.values[j] - mean.values[j] * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_span_is_rejected() {
        let trace = trace_for(vec![0.0; 4], 2, 2, vec![(1, 1)]);
        assert!(cap_pool(&trace, 0, PoolMode::Mean).is_err());
    }

    #[test]
    fn lexicon_rejects_self_substitution() {
        let mut map = BTreeMap::new();
        map.insert("word".to_string(), vec!["word".to_string()]);
        assert!(SynonymLexicon::new(map, 0).is_err());
    }

    #[test]
    fn replace_synonyms_is_deterministic_and_slot_bound() {
        let ds = gen_idm(31, 100).unwrap();
        let ex = &ds.split.train[0];
        let (a, oa) = replace_synonyms(ex, &ds.lexicon, &ds.tokenizer, 0.25, 77).unwrap();
        let (b, _) = replace_synonyms(ex, &ds.lexicon, &ds.tokenizer, 0.25, 77).unwrap();
        assert_eq!(a, b);
        // ceil(0.25 * 2 eligible) = 1 word replaced.
        assert_eq!(oa, ReplaceOutcome::Replaced(1));
        let before: Vec<&str> = ex.prompt.split(' ').collect();
        let after: Vec<&str> = a.prompt.split(' ').collect();
        assert_eq!(before.len(), after.len());
        let changed: Vec<usize> = (0..before.len())
            .filter(|&i| before[i] != after[i])
            .collect();
        assert_eq!(changed.len(), 1);
        assert!(ex.synonym_slots.contains(&changed[0]));
        assert_eq!(a.target, ex.target);
    }

    #[test]
    fn replaced_words_stay_within_synonym_slots_across_corpus() {
        let ds = gen_idm(8, 120).unwrap();
        for (i, ex) in ds.split.train.iter().enumerate() {
            let (p, _) =
                replace_synonyms(ex, &ds.lexicon, &ds.tokenizer, 0.4, 1000 + i as u64).unwrap();
            let before: Vec<&str> = ex.prompt.split(' ').collect();
            let after: Vec<&str> = p.prompt.split(' ').collect();
            for (w, (b, a)) in before.iter().zip(after.iter()).enumerate() {
                if b != a {
                    assert!(ex.synonym_slots.contains(&w));
                }
            }
        }
    }

    #[test]
    fn identity_lexicon_gives_consist_syn_100() {
        let ds = gen_idm(3, 80).unwrap();
        let id_lex =
            SynonymLexicon::identity_for_tests(ds.lexicon.words().collect::<Vec<_>>());
        let mut ds2 = ds.clone();
        ds2.lexicon = id_lex;
        // A model that is right at least once: cheat by using train answers
        // from an untrained model is unreliable, so synthesize competence by
        // checking the no-op property only over whatever it gets right.
        let model =
            Transformer::new(TransformerConfig::desk_default(ds2.vocab_size()), 5).unwrap();
        let cs = run_synonym_eval(&model, &ds2, SplitName::Train, 0.25, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(cs.len(), 5);
        for v in cs.into_iter().flatten() {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn rate_bounds_are_enforced() {
        let ds = gen_idm(3, 80).unwrap();
        let ex = &ds.split.train[0];
        assert!(replace_synonyms(ex, &ds.lexicon, &ds.tokenizer, 0.0, 1).is_err());
        assert!(replace_synonyms(ex, &ds.lexicon, &ds.tokenizer, 1.5, 1).is_err());
    }
}
