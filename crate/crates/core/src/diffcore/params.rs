use std::collections::{BTreeMap, HashMap};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named tensors: weights, biases and raw physical parameters, or the
/// gradients with respect to them. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ))),
            None => Err(Error::Unbound(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Squared Euclidean norm over all entries.
    pub fn norm_sq(&self) -> T {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum()
    }

    /// Subset of entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamSet<T>) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor<T>> {
        self.entries
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Source of named tensors for binding graph inputs.
pub trait Bindings<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T: Real> Bindings<T> for ParamSet<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }
}

impl<T> Bindings<T> for HashMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Bindings<T> for [(&str, Tensor<T>)] {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

impl<T, const N: usize> Bindings<T> for [(&str, Tensor<T>); N] {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.as_slice().lookup(name)
    }
}

impl<T, B: Bindings<T> + ?Sized> Bindings<T> for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        (**self).lookup(name)
    }
}

impl<T, A: Bindings<T>, B: Bindings<T>> Bindings<T> for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}
