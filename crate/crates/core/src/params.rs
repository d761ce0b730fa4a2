use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Named parameters with one gradient accumulator each.
///
/// Names iterate in lexicographic order, which fixes the order of every
/// traversal (checkpoints, gradient checks, updates).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter; its gradient slot is reset to zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != grad.shape() {
            return Err(dim_err("accumulate_grad", slot.shape(), grad.shape()));
        }
        slot.add_assign(grad)
    }

    /// Plain gradient descent: `p ← p − lr · ∇p` for every parameter.
    pub fn descend(&mut self, lr: f64) {
        for (name, value) in self.values.iter_mut() {
            let grad = &self.grads[name];
            for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
    }

    /// Copies all gradients out, keyed by name.
    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }
}
