//! Flat, named parameter storage shared by every model in the crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{GradBuffer, Group, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable {
    group: Group,
    params: Vec<Param>,
    names: Vec<String>,
}

impl ParamTable {
    pub fn new(group: Group) -> Self {
        Self { group, params: Vec::new(), names: Vec::new() }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    /// Registers a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let index = self.params.len();
        self.params.push(Param::new(value, self.group, index));
        self.names.push(name.into());
        index
    }

    #[inline]
    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    #[inline]
    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.params[slot].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.params.iter().map(|p| &p.value))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer::for_params(self.group, self.params.iter())
    }

    /// Hex SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load_named<'t>(&mut self, entries: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> Result<()> {
        let mut seen = alloc::vec![false; self.params.len()];
        for (name, value) in entries {
            let slot = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Load(format!("unexpected parameter `{name}`")))?;
            let target = &mut self.params[slot].value;
            if target.shape() != value.shape() {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    target.shape()
                )));
            }
            *target = value.clone();
            seen[slot] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Load(format!("parameter `{}` missing", self.names[missing])));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
