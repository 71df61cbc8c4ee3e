//! Named parameter tensors with trainable/frozen flags.

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ordered map from dotted parameter name to tensor.
///
/// A parameter is trainable exactly when its tensor requires a gradient, so
/// freezing through the registry also stops gradient accumulation in the graph.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    params: IndexMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&self, name: &str, trainable: bool) -> Result<()> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))?;
        t.set_requires_grad(trainable);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.get(name).is_some_and(Tensor::requires_grad)
    }

    /// Number of scalar elements across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Resets every trainable gradient to zeros.
    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&self) {
        self.params.values().for_each(Tensor::clear_grad);
    }

    /// Copies of all parameter values, in registry order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.values().map(Tensor::to_vec).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Consistency(format!(
                "snapshot holds {} tensors, registry {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (t, values) in self.params.values().zip(snapshot) {
            t.assign(values)?;
        }
        Ok(())
    }
}
