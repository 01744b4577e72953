use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::nn::LayerTag;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tag: LayerTag,
    pub value: Tensor<T>,
}

/// Ordered, tagged model parameters: the unit exchanged between clients and
/// the server.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedParameterSet<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> NamedParameterSet<T> {
    pub fn new(entries: Vec<NamedTensor<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Schema {
                    name: e.name.clone(),
                    reason: "duplicate parameter name".into(),
                });
            }
        }
        Ok(NamedParameterSet { entries })
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<NamedTensor<T>> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Keep only entries accepted by `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&NamedTensor<T>) -> bool) -> Self {
        NamedParameterSet {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// A set with the same schema and every value zero.
    pub fn zeros_like(&self) -> Self {
        self.map_values(|_| T::zero())
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        NamedParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tag: e.tag,
                    value: e.value.map(&f),
                })
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Check that `other` has identical names, order, tags and shapes.
    pub fn check_same_schema(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            let name = self
                .entries
                .iter()
                .map(|e| &e.name)
                .find(|n| other.get(n).is_none())
                .or_else(|| other.entries.iter().map(|e| &e.name).find(|n| self.get(n).is_none()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Schema {
                name,
                reason: format!(
                    "{} entries vs {} entries",
                    self.entries.len(),
                    other.entries.len()
                ),
            });
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Schema {
                    name: b.name.clone(),
                    reason: format!("expected `{}` at this position", a.name),
                });
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::Schema {
                    name: a.name.clone(),
                    reason: format!("shape {:?} vs {:?}", a.value.shape(), b.value.shape()),
                });
            }
            if a.tag != b.tag {
                return Err(Error::Schema {
                    name: a.name.clone(),
                    reason: "layer tag differs".into(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NamedParameterSet<U> {
        NamedParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tag: e.tag,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    pub fn with_prefix(self, prefix: &str) -> Self {
        NamedParameterSet {
            entries: self
                .entries
                .into_iter()
                .map(|mut e| {
                    e.name = format!("{prefix}{}", e.name);
                    e
                })
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        NamedParameterSet {
            entries: self
                .entries
                .iter()
                .filter_map(|e| {
                    e.name.strip_prefix(prefix).map(|rest| NamedTensor {
                        name: rest.to_string(),
                        tag: e.tag,
                        value: e.value.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) -> Result<()> {
        let mut all = std::mem::take(&mut self.entries);
        all.extend(other.entries);
        *self = Self::new(all)?;
        Ok(())
    }
}
