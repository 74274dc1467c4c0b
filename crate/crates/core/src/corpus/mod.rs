//! Labeled sentences, corpus splits, the synthetic template grammar and the
//! shared vocabulary.

mod grammar;
mod schema;
mod vocab;

pub use grammar::{generate_synthetic_corpus, Content, SplitRatios, Template, TemplateBank, VerbForms};
pub use schema::{Attribute, AttributeSchema, ValueRef};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    /// One value index per schema attribute, in schema order.
    pub labels: Vec<usize>,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<usize>, schema: &AttributeSchema) -> Result<Self> {
        let s = Self { tokens, labels };
        s.validate(schema).map_err(|message| Error::Validation { line: 0, message })?;
        Ok(s)
    }

    /// Builds a sentence from raw text and `(attribute, value)` label names.
    pub fn from_named(
        text: &str,
        labels: &[(&str, &str)],
        schema: &AttributeSchema,
    ) -> core::result::Result<Self, String> {
        let tokens = tokenize(text);
        let mut idx = alloc::vec![usize::MAX; schema.len()];
        for (name, value) in labels {
            let a = schema
                .attribute_index(name)
                .ok_or_else(|| format!("unknown attribute `{name}`"))?;
            if idx[a] != usize::MAX {
                return Err(format!("attribute `{name}` labeled twice"));
            }
            idx[a] = schema
                .value_index(a, value)
                .ok_or_else(|| format!("unknown value `{value}` for attribute `{name}`"))?;
        }
        let s = Self { tokens, labels: idx };
        s.validate(schema)?;
        Ok(s)
    }

    pub fn validate(&self, schema: &AttributeSchema) -> core::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("sentence has no tokens".to_string());
        }
        if self.labels.len() != schema.len() {
            return Err(format!("expected {} labels, found {}", schema.len(), self.labels.len()));
        }
        for (a, (attr, v)) in schema.attributes().iter().zip(&self.labels).enumerate() {
            if *v == usize::MAX {
                return Err(format!("missing label for attribute `{}`", attr.name));
            }
            if *v >= attr.values.len() {
                return Err(format!("label index {v} out of range for attribute {a}"));
            }
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn label(&self, attribute: usize) -> usize {
        self.labels[attribute]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub schema: AttributeSchema,
    pub train: Vec<LabeledSentence>,
    pub dev: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

impl CorpusSplit {
    pub fn new(
        schema: AttributeSchema,
        train: Vec<LabeledSentence>,
        dev: Vec<LabeledSentence>,
        test: Vec<LabeledSentence>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let split = Self { schema, train, dev, test };
        for name in SplitName::ALL {
            for (i, s) in split.get(name).iter().enumerate() {
                s.validate(&split.schema)
                    .map_err(|message| Error::Validation { line: i + 1, message })?;
            }
        }
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn get(&self, name: SplitName) -> &[LabeledSentence] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    /// `(train, dev, test)` sentence counts.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    /// Sentence identity (tokens and labels) may occur in only one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeSet<&LabeledSentence> = BTreeSet::new();
        for name in SplitName::ALL {
            let mut local: BTreeSet<&LabeledSentence> = BTreeSet::new();
            for (i, s) in self.get(name).iter().enumerate() {
                if seen.contains(s) {
                    return Err(Error::Validation {
                        line: i + 1,
                        message: format!("`{}` in {} also occurs in an earlier split", s.text(), name.as_str()),
                    });
                }
                local.insert(s);
            }
            seen.extend(local);
        }
        Ok(())
    }

    /// Sentences per attribute value in the train split, attribute-major.
    pub fn train_label_counts(&self) -> Vec<Vec<usize>> {
        let mut counts: Vec<Vec<usize>> =
            self.schema.attributes().iter().map(|a| alloc::vec![0; a.values.len()]).collect();
        for s in &self.train {
            for (a, v) in s.labels.iter().enumerate() {
                counts[a][*v] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_lowercases() {
        assert_eq!(tokenize("  The Report\twas  READ "), ["the", "report", "was", "read"]);
    }

    #[test]
    fn named_labels_validate() {
        let schema = AttributeSchema::tense_voice();
        let s = LabeledSentence::from_named("a b", &[("tense", "past"), ("voice", "active")], &schema)
            .unwrap();
        assert_eq!(s.labels, [1, 1]);
        assert!(LabeledSentence::from_named("a", &[("tense", "later"), ("voice", "active")], &schema)
            .unwrap_err()
            .contains("later"));
        assert!(LabeledSentence::from_named("a", &[("tense", "past")], &schema)
            .unwrap_err()
            .contains("voice"));
        assert!(LabeledSentence::from_named(" ", &[("tense", "past"), ("voice", "active")], &schema)
            .is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let schema = AttributeSchema::tense_voice();
        let s = LabeledSentence::new(tokenize("x y"), alloc::vec![0, 0], &schema).unwrap();
        let err = CorpusSplit::new(schema, alloc::vec![s.clone()], alloc::vec![], alloc::vec![s]).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn empty_train_rejected() {
        let err = CorpusSplit::new(AttributeSchema::tense_voice(), alloc::vec![], alloc::vec![], alloc::vec![])
            .unwrap_err();
        assert_eq!(err, Error::EmptySplit("train".into()));
    }
}
