//! Word-level tokenizer over the world's closed vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Grammar;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Bijective word ↔ index map; specials occupy indices 0–3, real words
/// follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tokenizer {
    words: Vec<String>,
}

impl Tokenizer {
    pub fn from_vocabulary(vocabulary: &[String]) -> Result<Self> {
        let mut sorted: Vec<String> = vocabulary.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.iter().any(|w| SPECIALS.contains(&w.as_str())) {
            return Err(Error::Contract("vocabulary collides with special tokens".into()));
        }
        if sorted.is_empty() {
            return Err(Error::Contract("empty vocabulary".into()));
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(sorted);
        Ok(Tokenizer { words })
    }

    pub fn from_grammar(grammar: &Grammar) -> Result<Self> {
        Self::from_vocabulary(&grammar.vocabulary())
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode_word(&self, word: &str) -> Result<usize> {
        self.words[SPECIALS.len()..]
            .binary_search_by(|w| w.as_str().cmp(word))
            .map(|i| i + SPECIALS.len())
            .map_err(|_| Error::Lookup(format!("word not in vocabulary: {word}")))
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.encode_word(w)).collect()
    }

    /// Token index → surface form (specials render as `<bos>` etc.).
    pub fn word_of(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(|w| w.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} out of vocabulary")))
    }

    /// Decode to words, dropping special tokens.
    pub fn decode_words(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let w = self.word_of(id)?;
            if id >= SPECIALS.len() {
                out.push(w.to_string());
            }
        }
        Ok(out)
    }
}
