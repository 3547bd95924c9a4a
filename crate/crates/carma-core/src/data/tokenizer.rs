//! Fixed-chunk subword tokenizer with exact word spans.
//!
//! Words split into 3-character chunks; continuation chunks carry a `##`
//! prefix so token sequences decode losslessly back to single-spaced text.
//! Words longer than three characters therefore always produce at least two
//! tokens, which is what gives the MI loss its positive sets. A reserved set
//! of answer words (terms, labels) is kept whole as single tokens.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Beginning-of-sequence marker.
pub const BOS: TokenId = 0;
/// Padding token; excluded from losses and spans wherever it appears.
pub const PAD: TokenId = 1;
/// Separator between prompt and answer position.
pub const SEP: TokenId = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<pad>", "<sep>"];
const CHUNK: usize = 3;

/// Deterministic closed-vocabulary tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    token_to_id: BTreeMap<String, TokenId>,
    id_to_token: Vec<String>,
    whole_words: BTreeSet<String>,
}

/// Tokens plus one `(start, end)` token range per surface word.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<TokenId>,
    pub word_spans: Vec<(usize, usize)>,
}

fn check_word(word: &str) -> Result<()> {
    if word.is_empty() {
        return Err(Error::Encoding("empty word (double space?)".into()));
    }
    for ch in word.chars() {
        if !ch.is_ascii_lowercase() {
            return Err(Error::Encoding(format!(
                "character {ch:?} in {word:?} is outside the generator alphabet"
            )));
        }
    }
    Ok(())
}

fn chunk_word(word: &str) -> Vec<String> {
    word.as_bytes()
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| {
            let piece = std::str::from_utf8(c).expect("ascii input");
            if i == 0 {
                piece.to_string()
            } else {
                format!("##{piece}")
            }
        })
        .collect()
}

impl Tokenizer {
    /// Builds the vocabulary: specials, then reserved whole words, then the
    /// chunk inventory of `prompt_words` — each group sorted, so the mapping
    /// is a pure function of the inputs.
    pub fn build<'a>(
        prompt_words: impl IntoIterator<Item = &'a str>,
        reserved_words: impl IntoIterator<Item = &'a str>,
    ) -> Result<Tokenizer> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();

        let whole: BTreeSet<String> = reserved_words
            .into_iter()
            .map(|w| {
                check_word(w)?;
                Ok(w.to_string())
            })
            .collect::<Result<_>>()?;
        id_to_token.extend(whole.iter().cloned());

        let mut chunks: BTreeSet<String> = BTreeSet::new();
        for word in prompt_words {
            check_word(word)?;
            chunks.extend(chunk_word(word));
        }
        for c in chunks {
            if !whole.contains(&c) {
                id_to_token.push(c);
            }
        }

        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(Tokenizer {
            token_to_id,
            id_to_token,
            whole_words: whole,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Id of a reserved whole word (answer vocabulary).
    pub fn whole_word_id(&self, word: &str) -> Option<TokenId> {
        if self.whole_words.contains(word) {
            self.token_to_id.get(word).copied()
        } else {
            None
        }
    }

    /// Encodes single-spaced text; every surface word becomes one span.
    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        if text.is_empty() {
            return Ok(Tokenized {
                ids,
                word_spans: spans,
            });
        }
        for word in text.split(' ') {
            check_word(word)?;
            let start = ids.len();
            if let Some(id) = self.whole_word_id(word) {
                ids.push(id);
            } else {
                for piece in chunk_word(word) {
                    let id = self.token_to_id.get(&piece).copied().ok_or_else(|| {
                        Error::Encoding(format!("chunk {piece:?} not in vocabulary"))
                    })?;
                    ids.push(id);
                }
            }
            spans.push((start, ids.len()));
        }
        Ok(Tokenized {
            ids,
            word_spans: spans,
        })
    }

    /// Inverse of [`Tokenizer::tokenize`] on generator text.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(Error::IndexOutOfRange {
                what: "token id",
                index: id as usize,
                bound: self.vocab_size(),
            })?;
            if let Some(cont) = tok.strip_prefix("##") {
                out.push_str(cont);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// `[BOS] prompt [SEP]` encoding for the cloze tasks; spans shift past
    /// the BOS token and never cover specials.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Tokenized> {
        let body = self.tokenize(prompt)?;
        let mut ids = Vec::with_capacity(body.ids.len() + 2);
        ids.push(BOS);
        ids.extend(&body.ids);
        ids.push(SEP);
        let word_spans = body
            .word_spans
            .iter()
            .map(|&(s, e)| (s + 1, e + 1))
            .collect();
        Ok(Tokenized { ids, word_spans })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::build(
            ["cat", "brilliant", "the", "called"],
            ["coast", "positive"],
        )
        .unwrap()
    }

    #[test]
    fn short_word_is_single_token() {
        let tk = toy();
        let t = tk.tokenize("cat").unwrap();
        assert_eq!(t.ids.len(), 1);
        assert_eq!(t.word_spans, vec![(0, 1)]);
    }

    #[test]
    fn nine_char_word_is_three_tokens_one_span() {
        let tk = toy();
        let t = tk.tokenize("brilliant").unwrap();
        assert_eq!(t.ids.len(), 3);
        assert_eq!(t.word_spans, vec![(0, 3)]);
    }

    #[test]
    fn round_trip_is_lossless() {
        let tk = toy();
        for text in ["cat", "the brilliant cat", "brilliant brilliant", "coast"] {
            let t = tk.tokenize(text).unwrap();
            assert_eq!(tk.detokenize(&t.ids).unwrap(), text, "{text}");
        }
    }

    #[test]
    fn reserved_words_stay_whole() {
        let tk = toy();
        let t = tk.tokenize("coast").unwrap();
        assert_eq!(t.ids.len(), 1);
        assert_eq!(tk.whole_word_id("coast"), Some(t.ids[0]));
    }

    #[test]
    fn out_of_alphabet_is_an_encoding_error() {
        let tk = toy();
        assert!(matches!(tk.tokenize("Cat"), Err(Error::Encoding(_))));
        assert!(matches!(tk.tokenize("so-so"), Err(Error::Encoding(_))));
        assert!(matches!(tk.tokenize("a  b"), Err(Error::Encoding(_))));
    }

    #[test]
    fn encode_prompt_wraps_with_specials_and_shifts_spans() {
        let tk = toy();
        let enc = tk.encode_prompt("the brilliant cat").unwrap();
        assert_eq!(enc.ids[0], BOS);
        assert_eq!(*enc.ids.last().unwrap(), SEP);
        assert_eq!(enc.word_spans, vec![(1, 2), (2, 5), (5, 6)]);
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let a = toy();
        let b = toy();
        assert_eq!(a, b);
    }
}
