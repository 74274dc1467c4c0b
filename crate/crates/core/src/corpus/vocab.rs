use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use sha2::{Digest, Sha256};

use super::CorpusSplit;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dense token ids; the four reserved tokens occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Train tokens seen at least `min_count` times, most frequent first
    /// (ties broken alphabetically).
    pub fn build(corpus: &CorpusSplit, min_count: usize) -> Result<Self> {
        if corpus.train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &corpus.train {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|t| t.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Load("vocabulary must start with the four reserved tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Load(format!("token `{t}` appears twice in the vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, stopping at end-of-sequence and skipping
    /// padding and begin-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, AttributeSchema, LabeledSentence};

    fn one_sentence(text: &str) -> CorpusSplit {
        let schema = AttributeSchema::tense_voice();
        let s = LabeledSentence::new(tokenize(text), alloc::vec![0, 0], &schema).unwrap();
        CorpusSplit::new(schema, alloc::vec![s], alloc::vec![], alloc::vec![]).unwrap()
    }

    #[test]
    fn builds_reserved_plus_words() {
        let v = Vocabulary::build(&one_sentence("a b a"), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[..4], &RESERVED);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = Vocabulary::build(&one_sentence("a b a"), 2).unwrap();
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(&one_sentence("a b a"), 1).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), ["a", "b"]);
    }

    #[test]
    fn fingerprint_tracks_token_order() {
        let a = Vocabulary::build(&one_sentence("a b a"), 1).unwrap();
        let b = Vocabulary::build(&one_sentence("b a b"), 1).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn from_tokens_requires_reserved_prefix() {
        assert!(Vocabulary::from_tokens(alloc::vec!["a".into()]).is_err());
    }
}
