//! Deterministic generators for the IDM and SC analogues.
//!
//! IDM: a compositional lexicon of attribute and concept slots, each with
//! three interchangeable surface forms. A definition template renders one
//! (attribute, concept) pair; its term is a fresh single-token word that is
//! a function of the pair, so meaning is compositional by construction.
//!
//! SC: templated sentences over a polarity lexicon. Negators flip polarity,
//! intensifiers preserve it, and every test item uses a modifier–adjective
//! pair that never occurs in train.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::interventions::SynonymLexicon;
use crate::util::stream_rng;

use super::tokenizer::Tokenizer;
use super::{Dataset, DatasetSplit, Example, Task};

const FORMS_PER_SLOT: usize = 3;

/// A slot's interchangeable surface forms: three that the generator renders
/// into prompts, plus one reserved for the synonym lexicon only. The
/// reserved form is every rendered form's top-ranked substitute, so synonym
/// replacement probes surface forms the model never trained on while staying
/// inside the slot's meaning.
#[derive(Debug, Clone)]
struct Slot {
    rendered: Vec<String>,
    fresh: String,
}

impl Slot {
    fn new(stem: &str, suffixes: [&str; FORMS_PER_SLOT], fresh_suffix: &str) -> Self {
        Slot {
            rendered: suffixes.iter().map(|s| format!("{stem}{s}")).collect(),
            fresh: format!("{stem}{fresh_suffix}"),
        }
    }

    fn from_words(rendered: [&str; FORMS_PER_SLOT], fresh: &str) -> Self {
        Slot {
            rendered: rendered.iter().map(|s| s.to_string()).collect(),
            fresh: fresh.to_string(),
        }
    }

    fn all_forms(&self) -> impl Iterator<Item = &String> {
        self.rendered.iter().chain(std::iter::once(&self.fresh))
    }
}

const ATTR_ONSETS: [&str; 12] = [
    "bl", "cr", "dr", "fl", "gl", "pr", "sk", "tr", "br", "st", "sw", "kl",
];
const ATTR_CORES: [&str; 10] = [
    "immer", "ander", "ovest", "ulkin", "arnel", "ostin", "ebbly", "ungor", "ilvar", "ommet",
];
const CONCEPT_ONSETS: [&str; 12] = [
    "sn", "fl", "gr", "pl", "br", "dr", "kr", "sp", "tr", "cl", "wh", "sm",
];
const CONCEPT_CORES: [&str; 10] = [
    "orple", "antle", "izmet", "uckle", "ovane", "ellet", "ixlet", "ambra", "othel", "under",
];
const CODE_CONS: [&str; 14] = [
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t",
];
const CODE_VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

const MAX_SLOTS_PER_SIDE: usize = 120;

fn attr_stem(i: usize) -> String {
    format!("{}{}", ATTR_ONSETS[i % 12], ATTR_CORES[(i / 12) % 10])
}

fn concept_stem(i: usize) -> String {
    format!("{}{}", CONCEPT_ONSETS[i % 12], CONCEPT_CORES[(i / 12) % 10])
}

/// Fixed-width pair code; injective for i < 980.
fn code3(i: usize) -> String {
    format!(
        "{}{}{}",
        CODE_CONS[i % 14],
        CODE_VOWELS[(i / 14) % 5],
        CODE_CONS[(i / 70) % 14]
    )
}

fn term_for(attr: usize, concept: usize) -> String {
    format!("x{}{}", code3(attr), code3(concept))
}

/// Slot-preserving substitutes. Every rendered form ranks the slot's
/// reserved fresh form first, then the other rendered forms in rotation;
/// the fresh form itself falls back to the rendered forms.
fn lexicon_from_slots<'a>(
    slots: impl Iterator<Item = &'a Slot>,
    seed: u64,
) -> Result<SynonymLexicon> {
    let mut map = BTreeMap::new();
    let mut insert = |word: String, subs: Vec<String>| -> Result<()> {
        if map.insert(word.clone(), subs).is_some() {
            return Err(Error::Generation(format!(
                "surface form {word:?} appears in two slots"
            )));
        }
        Ok(())
    };
    for slot in slots {
        let n = slot.rendered.len();
        for (i, form) in slot.rendered.iter().enumerate() {
            let mut subs = vec![slot.fresh.clone()];
            subs.extend((1..n).map(|off| slot.rendered[(i + off) % n].clone()));
            insert(form.clone(), subs)?;
        }
        insert(slot.fresh.clone(), slot.rendered.clone())?;
    }
    SynonymLexicon::new(map, seed)
}

fn check_min_items(n_items: usize) -> Result<()> {
    if n_items < 50 {
        return Err(Error::Generation(format!(
            "n_items must be >= 50, got {n_items}"
        )));
    }
    Ok(())
}

fn build_examples(
    tokenizer: &Tokenizer,
    task: Task,
    items: Vec<(String, String, Vec<usize>)>,
) -> Result<Vec<Example>> {
    items
        .into_iter()
        .map(|(prompt, target_text, synonym_slots)| {
            let toks = tokenizer.tokenize(&prompt)?;
            let target = tokenizer.whole_word_id(&target_text).ok_or_else(|| {
                Error::Generation(format!("target {target_text:?} is not a single token"))
            })?;
            Ok(Example {
                prompt,
                target,
                target_text,
                task,
                word_spans: toks.word_spans,
                synonym_slots,
            })
        })
        .collect()
}

/// Surface renderings of each trained pair; variation across renders is
/// what makes form-invariance learnable.
const TRAIN_RENDERS_PER_PAIR: usize = 3;

/// Generates the inverse-definition-modelling analogue.
///
/// Split sizes are 80/10/10. Every training pair is rendered up to three
/// times with distinct surface-form combinations; validation re-renders
/// trained pairs with a fourth combination (substitutivity), while test
/// pairs are unseen attribute–concept combinations whose constituent words
/// each occur in train (novel composition).
pub fn gen_idm(seed: u64, n_items: usize) -> Result<Dataset> {
    check_min_items(n_items)?;
    let n_val = (n_items / 10).max(1);
    let n_test = (n_items / 10).max(1);
    let n_train = n_items - n_val - n_test;
    let n_train_pairs = n_train.div_ceil(TRAIN_RENDERS_PER_PAIR);
    if n_val > n_train_pairs {
        return Err(Error::Generation(
            "validation larger than the trained pair inventory".into(),
        ));
    }

    let pairs_needed = n_train_pairs + n_test;
    let side = ((pairs_needed as f64 * 1.15).sqrt().ceil() as usize).max(2);
    if side > MAX_SLOTS_PER_SIDE {
        return Err(Error::Generation(format!(
            "n_items {n_items} needs {side} slots per side; vocabulary overflow"
        )));
    }

    let attrs: Vec<Slot> = (0..side)
        .map(|i| Slot::new(&attr_stem(i), ["", "ish", "ful"], "oid"))
        .collect();
    let concepts: Vec<Slot> = (0..side)
        .map(|i| Slot::new(&concept_stem(i), ["", "et", "ine"], "ule"))
        .collect();

    let mut rng = stream_rng(seed, "idm-split");
    let mut pairs: Vec<(usize, usize)> = (0..side)
        .flat_map(|a| (0..side).map(move |c| (a, c)))
        .collect();
    pairs.shuffle(&mut rng);

    let train_pairs: Vec<(usize, usize)> = pairs[..n_train_pairs].to_vec();
    let seen_attrs: BTreeSet<usize> = train_pairs.iter().map(|p| p.0).collect();
    let seen_concepts: BTreeSet<usize> = train_pairs.iter().map(|p| p.1).collect();
    let test_pairs: Vec<(usize, usize)> = pairs[n_train_pairs..]
        .iter()
        .copied()
        .filter(|(a, c)| seen_attrs.contains(a) && seen_concepts.contains(c))
        .take(n_test)
        .collect();
    if test_pairs.len() < n_test {
        return Err(Error::Generation(
            "could not reserve enough unseen pairs with trained constituents".into(),
        ));
    }

    let mut val_sources: Vec<usize> = (0..n_train_pairs).collect();
    val_sources.shuffle(&mut rng);
    val_sources.truncate(n_val);

    let mut form_rng = stream_rng(seed, "idm-forms");
    let render = |a: usize, c: usize, fa: usize, fc: usize| -> (String, String, Vec<usize>) {
        (
            format!(
                "the {} {} is called",
                attrs[a].rendered[fa], concepts[c].rendered[fc]
            ),
            term_for(a, c),
            vec![1, 2],
        )
    };

    // Per pair: a shuffled deck of the nine form combinations. Train renders
    // draw from the front, validation takes the next one, so prompts never
    // repeat across splits.
    let mut combo_decks: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_train_pairs);
    for _ in 0..n_train_pairs {
        let mut deck: Vec<(usize, usize)> = (0..FORMS_PER_SLOT)
            .flat_map(|fa| (0..FORMS_PER_SLOT).map(move |fc| (fa, fc)))
            .collect();
        deck.shuffle(&mut form_rng);
        combo_decks.push(deck);
    }

    let mut train_items = Vec::with_capacity(n_train);
    'fill: for r in 0..TRAIN_RENDERS_PER_PAIR {
        for (i, &(a, c)) in train_pairs.iter().enumerate() {
            if train_items.len() == n_train {
                break 'fill;
            }
            let (fa, fc) = combo_decks[i][r];
            train_items.push(render(a, c, fa, fc));
        }
    }
    let val_items: Vec<_> = val_sources
        .iter()
        .map(|&i| {
            let (a, c) = train_pairs[i];
            let (fa, fc) = combo_decks[i][TRAIN_RENDERS_PER_PAIR];
            render(a, c, fa, fc)
        })
        .collect();
    let test_items: Vec<_> = test_pairs
        .iter()
        .map(|&(a, c)| {
            let fa = form_rng.gen_range(0..FORMS_PER_SLOT);
            let fc = form_rng.gen_range(0..FORMS_PER_SLOT);
            render(a, c, fa, fc)
        })
        .collect();

    let mut prompt_words: Vec<String> = vec!["the".into(), "is".into(), "called".into()];
    for slot in attrs.iter().chain(concepts.iter()) {
        prompt_words.extend(slot.all_forms().cloned());
    }
    let mut terms: BTreeSet<String> = BTreeSet::new();
    for (_, t, _) in train_items.iter().chain(&val_items).chain(&test_items) {
        terms.insert(t.clone());
    }
    let tokenizer = Tokenizer::build(
        prompt_words.iter().map(|s| s.as_str()),
        terms.iter().map(|s| s.as_str()),
    )?;
    let lexicon = lexicon_from_slots(attrs.iter().chain(concepts.iter()), seed)?;

    Ok(Dataset {
        task: Task::Idm,
        generator_seed: seed,
        n_items,
        split: DatasetSplit {
            train: build_examples(&tokenizer, Task::Idm, train_items)?,
            validation: build_examples(&tokenizer, Task::Idm, val_items)?,
            test: build_examples(&tokenizer, Task::Idm, test_items)?,
            generator_seed: seed,
        },
        tokenizer,
        lexicon,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Polarity {
    Pos,
    Neg,
    Neu,
}

impl Polarity {
    fn label(self) -> &'static str {
        match self {
            Polarity::Pos => "positive",
            Polarity::Neg => "negative",
            Polarity::Neu => "neutral",
        }
    }

    fn flipped(self) -> Polarity {
        match self {
            Polarity::Pos => Polarity::Neg,
            Polarity::Neg => Polarity::Pos,
            Polarity::Neu => Polarity::Neu,
        }
    }

    fn index(self) -> usize {
        match self {
            Polarity::Pos => 0,
            Polarity::Neg => 1,
            Polarity::Neu => 2,
        }
    }
}

// Three rendered forms, one lexicon-only fresh form, and the polarity.
const SC_ADJS: [(&str, &str, &str, &str, Polarity); 18] = [
    ("brilliant", "radiant", "splendid", "luminous", Polarity::Pos),
    ("delightful", "charming", "gracious", "endearing", Polarity::Pos),
    ("superb", "stellar", "sublime", "majestic", Polarity::Pos),
    ("excellent", "admirable", "worthy", "laudable", Polarity::Pos),
    ("joyful", "cheerful", "merry", "gleeful", Polarity::Pos),
    ("lovely", "pleasant", "winsome", "agreeable", Polarity::Pos),
    ("dreadful", "horrid", "ghastly", "atrocious", Polarity::Neg),
    ("dismal", "gloomy", "bleak", "sombre", Polarity::Neg),
    ("awful", "rotten", "foul", "wretched", Polarity::Neg),
    ("tedious", "dreary", "dull", "monotonous", Polarity::Neg),
    ("clumsy", "sloppy", "shoddy", "slipshod", Polarity::Neg),
    ("bitter", "sour", "harsh", "acrid", Polarity::Neg),
    ("ordinary", "typical", "standard", "unremarkable", Polarity::Neu),
    ("average", "middling", "moderate", "medium", Polarity::Neu),
    ("plain", "simple", "modest", "unadorned", Polarity::Neu),
    ("usual", "routine", "common", "customary", Polarity::Neu),
    ("tempered", "balanced", "even", "measured", Polarity::Neu),
    ("passable", "tolerable", "fair", "adequate", Polarity::Neu),
];

const SC_NOUNS: [(&str, &str, &str, &str); 10] = [
    ("performance", "recital", "rendition", "production"),
    ("melody", "tune", "anthem", "ballad"),
    ("painting", "portrait", "canvas", "mural"),
    ("story", "tale", "fable", "yarn"),
    ("journey", "voyage", "trek", "expedition"),
    ("dinner", "supper", "feast", "banquet"),
    ("speech", "address", "oration", "sermon"),
    ("garden", "orchard", "meadow", "arbor"),
    ("machine", "gadget", "device", "contraption"),
    ("lecture", "seminar", "lesson", "tutorial"),
];

// Modifier slots: two rendered forms, one fresh; the first three slots flip
// polarity, the rest preserve it.
const SC_MODS: [(&str, &str, &str, bool); 6] = [
    ("scarcely", "barely", "faintly", true),
    ("hardly", "rarely", "nowise", true),
    ("never", "seldom", "noway", true),
    ("truly", "really", "verily", false),
    ("deeply", "richly", "amply", false),
    ("wholly", "fully", "utterly", false),
];

#[derive(Clone, Copy, Debug)]
struct ScCombo {
    adj: usize,
    noun: usize,
    modifier: Option<usize>,
}

impl ScCombo {
    fn label(&self) -> Polarity {
        let base = SC_ADJS[self.adj].4;
        match self.modifier {
            Some(m) if SC_MODS[m].3 => base.flipped(),
            _ => base,
        }
    }
}

/// Generates the sentiment-classification analogue.
///
/// Labels stay within one item of uniform per split; every test item uses a
/// held-out modifier–adjective pair.
pub fn gen_sc(seed: u64, n_items: usize) -> Result<Dataset> {
    check_min_items(n_items)?;
    let n_val = (n_items / 10).max(1);
    let n_test = (n_items / 10).max(1);
    let n_train = n_items - n_val - n_test;

    let mut rng = stream_rng(seed, "sc-split");

    // Held-out (modifier, adjective) pairs, balanced over resulting labels.
    let mut mod_adj: Vec<(usize, usize)> = (0..SC_MODS.len())
        .flat_map(|m| (0..SC_ADJS.len()).map(move |a| (m, a)))
        .collect();
    mod_adj.shuffle(&mut rng);
    let per_label_target = 6;
    let mut held_out: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut held_hist = [0usize; 3];
    for &(m, a) in &mod_adj {
        let combo = ScCombo {
            adj: a,
            noun: 0,
            modifier: Some(m),
        };
        let li = combo.label().index();
        if held_hist[li] < per_label_target {
            held_hist[li] += 1;
            held_out.insert((m, a));
        }
    }

    let mut test_pool: Vec<ScCombo> = Vec::new();
    let mut train_pool: Vec<ScCombo> = Vec::new();
    for adj in 0..SC_ADJS.len() {
        for noun in 0..SC_NOUNS.len() {
            let plain = ScCombo {
                adj,
                noun,
                modifier: None,
            };
            train_pool.push(plain);
            for m in 0..SC_MODS.len() {
                let combo = ScCombo {
                    adj,
                    noun,
                    modifier: Some(m),
                };
                if held_out.contains(&(m, adj)) {
                    test_pool.push(combo);
                } else {
                    train_pool.push(combo);
                }
            }
        }
    }
    test_pool.shuffle(&mut rng);
    train_pool.shuffle(&mut rng);

    // Round-robin over labels keeps each split within one item of uniform.
    let take_balanced = |pool: &mut Vec<ScCombo>, n: usize| -> Result<Vec<ScCombo>> {
        let mut buckets: [Vec<ScCombo>; 3] = Default::default();
        for c in pool.drain(..) {
            buckets[c.label().index()].push(c);
        }
        let mut out = Vec::with_capacity(n);
        let mut li = 0;
        let mut empty_rounds = 0;
        while out.len() < n && empty_rounds < 3 {
            match buckets[li].pop() {
                Some(c) => {
                    out.push(c);
                    empty_rounds = 0;
                }
                None => empty_rounds += 1,
            }
            li = (li + 1) % 3;
        }
        if out.len() < n {
            return Err(Error::Generation(format!(
                "combination space exhausted: wanted {n} items"
            )));
        }
        for b in buckets {
            pool.extend(b);
        }
        Ok(out)
    };

    let test_combos = take_balanced(&mut test_pool, n_test)?;
    let train_combos = take_balanced(&mut train_pool, n_train)?;
    let val_combos = take_balanced(&mut train_pool, n_val)?;

    let mut form_rng = stream_rng(seed, "sc-forms");
    let adj_form = |slot: usize, f: usize| -> &'static str {
        let (a, b, c, _, _) = SC_ADJS[slot];
        [a, b, c][f]
    };
    let noun_form = |slot: usize, f: usize| -> &'static str {
        let (a, b, c, _) = SC_NOUNS[slot];
        [a, b, c][f]
    };
    let mut render = |combo: &ScCombo| -> (String, String, Vec<usize>) {
        let fa = form_rng.gen_range(0..FORMS_PER_SLOT);
        let fnn = form_rng.gen_range(0..FORMS_PER_SLOT);
        let adj = adj_form(combo.adj, fa);
        let noun = noun_form(combo.noun, fnn);
        let label = combo.label().label().to_string();
        match combo.modifier {
            Some(m) => {
                let fm = form_rng.gen_range(0..2);
                let moder = [SC_MODS[m].0, SC_MODS[m].1][fm];
                (
                    format!("the {moder} {adj} {noun} sentiment is"),
                    label,
                    vec![1, 2, 3],
                )
            }
            None => (
                format!("the {adj} {noun} sentiment is"),
                label,
                vec![1, 2],
            ),
        }
    };

    let train_items: Vec<_> = train_combos.iter().map(&mut render).collect();
    let val_items: Vec<_> = val_combos.iter().map(&mut render).collect();
    let test_items: Vec<_> = test_combos.iter().map(&mut render).collect();

    let mut prompt_words: Vec<String> = vec!["the".into(), "sentiment".into(), "is".into()];
    let mut slots: Vec<Slot> = Vec::new();
    for (a, b, c, fresh, _) in SC_ADJS {
        slots.push(Slot::from_words([a, b, c], fresh));
    }
    for (a, b, c, fresh) in SC_NOUNS {
        slots.push(Slot::from_words([a, b, c], fresh));
    }
    for (a, b, fresh, _) in SC_MODS {
        slots.push(Slot {
            rendered: vec![a.into(), b.into()],
            fresh: fresh.into(),
        });
    }
    for s in &slots {
        prompt_words.extend(s.all_forms().cloned());
    }
    let labels = ["positive", "negative", "neutral"];
    let tokenizer = Tokenizer::build(
        prompt_words.iter().map(|s| s.as_str()),
        labels.iter().copied(),
    )?;
    let lexicon = lexicon_from_slots(slots.iter(), seed)?;

    Ok(Dataset {
        task: Task::Sc,
        generator_seed: seed,
        n_items,
        split: DatasetSplit {
            train: build_examples(&tokenizer, Task::Sc, train_items)?,
            validation: build_examples(&tokenizer, Task::Sc, val_items)?,
            test: build_examples(&tokenizer, Task::Sc, test_items)?,
            generator_seed: seed,
        },
        tokenizer,
        lexicon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitName;

    #[test]
    fn idm_is_deterministic() {
        let a = gen_idm(11, 120).unwrap();
        let b = gen_idm(11, 120).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.tokenizer, b.tokenizer);
    }

    #[test]
    fn idm_rejects_small_n() {
        assert!(gen_idm(1, 10).is_err());
    }

    #[test]
    fn idm_targets_are_unique_single_tokens() {
        let ds = gen_idm(3, 150).unwrap();
        for ex in ds.split.train.iter().chain(&ds.split.test) {
            // Each term maps to exactly one vocabulary token.
            let id = ds.tokenizer.whole_word_id(&ex.target_text);
            assert_eq!(id, Some(ex.target));
            let t = ds.tokenizer.tokenize(&ex.target_text).unwrap();
            assert_eq!(t.ids, vec![ex.target]);
        }
        // A term never spans splits between train and test.
        let train_terms: BTreeSet<_> = ds.split.train.iter().map(|e| e.target).collect();
        for ex in &ds.split.test {
            assert!(!train_terms.contains(&ex.target));
        }
        // Every trained pair has at most the configured render count.
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for ex in &ds.split.train {
            *counts.entry(ex.target).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c <= TRAIN_RENDERS_PER_PAIR));
    }

    #[test]
    fn idm_test_pairs_are_compositionally_held_out() {
        let ds = gen_idm(7, 200).unwrap();
        let pair_of = |ex: &Example| {
            let words: Vec<&str> = ex.prompt.split(' ').collect();
            (words[1].to_string(), words[2].to_string())
        };
        // Surface forms map 1:1 to slots, so comparing canonical slot words
        // needs the lexicon: here we compare targets instead, which encode
        // the pair, and check word-level coverage.
        let train_terms: BTreeSet<_> = ds.split.train.iter().map(|e| e.target).collect();
        for ex in &ds.split.test {
            assert!(
                !train_terms.contains(&ex.target),
                "test pair leaked into train"
            );
        }
        // Every test prompt's content words have lexicon coverage.
        for ex in &ds.split.test {
            let (a, c) = pair_of(ex);
            assert!(ds.lexicon.substitutes(&a).is_some());
            assert!(ds.lexicon.substitutes(&c).is_some());
        }
    }

    #[test]
    fn idm_splits_are_prompt_disjoint_and_sized() {
        let n = 300;
        let ds = gen_idm(5, n).unwrap();
        let (tr, va, te) = (
            ds.split.train.len(),
            ds.split.validation.len(),
            ds.split.test.len(),
        );
        assert_eq!(tr + va + te, n);
        assert_eq!(va, n / 10);
        assert_eq!(te, n / 10);
        let mut prompts = BTreeSet::new();
        for ex in ds
            .split
            .train
            .iter()
            .chain(&ds.split.validation)
            .chain(&ds.split.test)
        {
            assert!(prompts.insert(ex.prompt.clone()), "duplicate {}", ex.prompt);
        }
    }

    #[test]
    fn idm_round_trip_over_corpus_is_lossless() {
        let ds = gen_idm(2, 100).unwrap();
        for split in [SplitName::Train, SplitName::Validation, SplitName::Test] {
            for ex in ds.examples(split) {
                let t = ds.tokenizer.tokenize(&ex.prompt).unwrap();
                assert_eq!(ds.tokenizer.detokenize(&t.ids).unwrap(), ex.prompt);
                assert_eq!(t.word_spans, ex.word_spans);
            }
        }
    }

    #[test]
    fn multi_token_content_word_share_is_high() {
        for ds in [gen_idm(4, 150).unwrap(), gen_sc(4, 150).unwrap()] {
            let mut multi = 0usize;
            let mut total = 0usize;
            for ex in &ds.split.train {
                for &slot in &ex.synonym_slots {
                    let (s, e) = ex.word_spans[slot];
                    total += 1;
                    if e - s >= 2 {
                        multi += 1;
                    }
                }
            }
            assert!(
                multi as f64 >= 0.6 * total as f64,
                "only {multi}/{total} content words are multi-token"
            );
        }
    }

    #[test]
    fn sc_negation_flips_and_labels_are_balanced() {
        let ds = gen_sc(9, 300).unwrap();
        // Construction rule: a negated positive adjective labels negative.
        let combo = ScCombo {
            adj: 0,
            noun: 0,
            modifier: Some(0),
        };
        assert_eq!(combo.label(), Polarity::Neg);
        let neutral_negated = ScCombo {
            adj: 12,
            noun: 0,
            modifier: Some(1),
        };
        assert_eq!(neutral_negated.label(), Polarity::Neu);

        for split in [SplitName::Train, SplitName::Validation, SplitName::Test] {
            let exs = ds.examples(split);
            let mut hist = BTreeMap::new();
            for e in exs {
                *hist.entry(e.target_text.clone()).or_insert(0usize) += 1;
            }
            for (_, count) in hist {
                let frac = count as f64 / exs.len() as f64;
                assert!(
                    (frac - 1.0 / 3.0).abs() <= 0.1,
                    "label fraction {frac} in {split}"
                );
            }
        }
    }

    #[test]
    fn sc_test_modifier_adjective_pairs_absent_from_train() {
        let ds = gen_sc(13, 400).unwrap();
        let mod_words: BTreeSet<&str> = SC_MODS
            .iter()
            .flat_map(|(a, b, _, _)| [*a, *b])
            .collect();
        let canon = |ds: &Dataset, w: &str| -> String {
            // Canonical slot representative: lexicographically smallest form.
            let mut forms = vec![w.to_string()];
            forms.extend(ds.lexicon.substitutes(w).unwrap().iter().cloned());
            forms.sort();
            forms[0].clone()
        };
        let pair_of = |ds: &Dataset, ex: &Example| -> Option<(String, String)> {
            let words: Vec<&str> = ex.prompt.split(' ').collect();
            if mod_words.contains(words[1]) {
                Some((canon(ds, words[1]), canon(ds, words[2])))
            } else {
                None
            }
        };
        let train_pairs: BTreeSet<_> = ds
            .split
            .train
            .iter()
            .filter_map(|e| pair_of(&ds, e))
            .collect();
        let mut checked = 0;
        for ex in &ds.split.test {
            let p = pair_of(&ds, ex).expect("test items carry a modifier");
            assert!(!train_pairs.contains(&p), "pair {p:?} leaked");
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn sc_is_deterministic() {
        let a = gen_sc(21, 200).unwrap();
        let b = gen_sc(21, 200).unwrap();
        assert_eq!(a.split, b.split);
    }
}
