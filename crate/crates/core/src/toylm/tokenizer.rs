// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer with reserved `<eos>`, `<pad>` and `<unk>` tokens.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

pub const EOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Splits text into word tokens: whitespace-separated words, with a trailing
/// `?`, `,`, `!` or `.` and a possessive `'s` split off as their own tokens.
/// Interior punctuation is kept, so `555-234-5678` and
/// `casey.smith12@example.com` stay single tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = raw;
        let mut trailing = Vec::new();
        while let Some(last) = word.chars().last() {
            if matches!(last, '?' | ',' | '!' | '.') && word.len() > 1 {
                trailing.push(last.to_string());
                word = &word[..word.len() - 1];
            } else {
                break;
            }
        }
        if let Some(stem) = word.strip_suffix("'s").filter(|s| !s.is_empty()) {
            out.push(stem.to_string());
            out.push("'s".to_string());
        } else {
            out.push(word.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from a corpus. Ids 0..3 are `<eos>`, `<pad>`,
    /// `<unk>`; the remaining words follow in sorted order, so the mapping
    /// does not depend on corpus order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("tokenizer corpus is empty"));
        }
        let words: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| split_words(s.as_ref()))
            .filter(|w| w != EOS && w != PAD && w != UNK)
            .collect();
        let vocab = [EOS, PAD, UNK]
            .into_iter()
            .map(String::from)
            .chain(words)
            .collect();
        Ok(Self::from_vocab(vocab))
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn eos_id(&self) -> u32 {
        EOS_ID
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.vocab)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_str(s)?;
        if vocab.len() < 3 || vocab[0] != EOS || vocab[1] != PAD || vocab[2] != UNK {
            return Err(Error::Format("tokenizer vocab lacks reserved prefix".into()));
        }
        Ok(Self::from_vocab(vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_reserved_tokens_plus_distinct_words() {
        let tok = Tokenizer::build(&["the cat", "the dog"]).unwrap();
        assert_eq!(tok.vocab(), &["<eos>", "<pad>", "<unk>", "cat", "dog", "the"]);
    }

    #[test]
    fn encoding_is_deterministic_and_order_free() {
        let a = Tokenizer::build(&["the cat", "the dog"]).unwrap();
        let b = Tokenizer::build(&["the dog", "the cat"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.encode("the dog"), b.encode("the dog"));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::build(&["the cat"]).unwrap();
        assert_eq!(tok.encode("the bird"), vec![tok.id("the"), UNK_ID]);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(Tokenizer::build(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn splitting_keeps_structured_answers_whole() {
        assert_eq!(
            split_words("What is Casey Smith's phone number?"),
            vec!["What", "is", "Casey", "Smith", "'s", "phone", "number", "?"]
        );
        assert_eq!(split_words("555-234-5678"), vec!["555-234-5678"]);
        assert_eq!(
            split_words("12 Oak St, Lakeside, AA 01234"),
            vec!["12", "Oak", "St", ",", "Lakeside", ",", "AA", "01234"]
        );
        assert_eq!(
            split_words("casey.smith7@example.com"),
            vec!["casey.smith7@example.com"]
        );
    }

    #[test]
    fn json_round_trip() {
        let tok = Tokenizer::build(&["a b c"]).unwrap();
        let back = Tokenizer::from_json(&tok.to_json().unwrap()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.id("b"), tok.id("b"));
    }
}
