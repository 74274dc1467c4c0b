use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered attributes and their ordered values. The order is the stream
/// order used by every plan and report downstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

/// A reference to one value of one attribute, by position in the schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueRef {
    pub attribute: usize,
    pub value: usize,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("schema needs at least one attribute".into()));
        }
        for (i, a) in attributes.iter().enumerate() {
            if a.name.is_empty() {
                return Err(Error::Config("attribute names must be non-empty".into()));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("attribute `{}` declared twice", a.name)));
            }
            if a.values.len() < 2 {
                return Err(Error::Config(format!(
                    "attribute `{}` needs at least two values",
                    a.name
                )));
            }
            for (j, v) in a.values.iter().enumerate() {
                if a.values[..j].contains(v) {
                    return Err(Error::Config(format!(
                        "value `{v}` repeated in attribute `{}`",
                        a.name
                    )));
                }
            }
        }
        Ok(Self { attributes })
    }

    /// Convenience constructor from string slices.
    pub fn from_pairs(pairs: &[(&str, &[&str])]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(name, values)| Attribute {
                    name: name.to_string(),
                    values: values.iter().map(|v| v.to_string()).collect(),
                })
                .collect(),
        )
    }

    /// tense → {future, past, present}, voice → {passive, active}
    pub fn tense_voice() -> Self {
        Self::from_pairs(&[
            ("tense", &["future", "past", "present"]),
            ("voice", &["passive", "active"]),
        ])
        .expect("static schema is valid")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, attribute: usize, value: &str) -> Option<usize> {
        self.attributes.get(attribute)?.values.iter().position(|v| v == value)
    }

    /// Finds a value by name alone; value names are resolved in schema order.
    pub fn find_value(&self, value: &str) -> Option<ValueRef> {
        self.attributes.iter().enumerate().find_map(|(a, attr)| {
            attr.values.iter().position(|v| v == value).map(|v| ValueRef { attribute: a, value: v })
        })
    }

    pub fn value_name(&self, r: ValueRef) -> &str {
        &self.attributes[r.attribute].values[r.value]
    }

    pub fn attribute_name(&self, attribute: usize) -> &str {
        &self.attributes[attribute].name
    }

    /// Every value of every attribute, attribute-major.
    pub fn all_values(&self) -> Vec<ValueRef> {
        self.attributes
            .iter()
            .enumerate()
            .flat_map(|(a, attr)| (0..attr.values.len()).map(move |v| ValueRef { attribute: a, value: v }))
            .collect()
    }

    /// The full cartesian product of value indices, lexicographic in schema order.
    pub fn combinations(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = alloc::vec![Vec::new()];
        for attr in &self.attributes {
            let mut next = Vec::with_capacity(out.len() * attr.values.len());
            for prefix in &out {
                for v in 0..attr.values.len() {
                    let mut c = prefix.clone();
                    c.push(v);
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }

    /// Renders a label vector as `tense=past, voice=active`.
    pub fn describe(&self, labels: &[usize]) -> String {
        let parts: Vec<String> = self
            .attributes
            .iter()
            .zip(labels)
            .map(|(a, v)| format!("{}={}", a.name, a.values[*v]))
            .collect();
        parts.join(", ")
    }
}
