use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Named parameter tensors, iterated in ascending name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        ParamTree {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Fails with a structural error naming the first differing entry.
    pub fn check_same_structure<U: Scalar>(&self, other: &ParamTree<U>) -> Result<()> {
        for (name, t) in &self.entries {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Structural(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Structural(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Sets the `requires_grad` flag on every entry.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        for t in self.entries.values_mut() {
            *t = std::mem::replace(t, Tensor::scalar(T::zero())).with_grad(requires_grad);
        }
        self
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamTree<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamTree {
            entries: iter.into_iter().collect(),
        }
    }
}
