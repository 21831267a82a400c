//! Flat registry of named learnable arrays with matching gradient slots.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

/// Index of a parameter in its [`ParameterStore`]; stable for the lifetime of
/// the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamDef {
    pub name: String,
    /// Shared with tape leaves during a forward pass; the optimizer uses
    /// `Arc::make_mut` so in-flight tapes keep the values they saw.
    pub value: Arc<Tensor>,
    /// Whether the array participates in weight decay (weights yes, biases no).
    pub decay: bool,
}

/// Registry of all learnable arrays, each with a gradient accumulator of the
/// same shape. Iteration order is insertion order, which keeps reductions and
/// serialization deterministic.
#[derive(Clone, Default)]
pub struct ParameterStore {
    params: Vec<ParamDef>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("parameter `{name}` already registered")));
        }
        let id = ParamId(self.params.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(ParamDef {
            name: name.to_string(),
            value: Arc::new(value),
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{}` has shape {:?}, refusing to load shape {:?}",
                self.params[id.0].name,
                self.params[id.0].value.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.fill(0.0);
        }
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamDef)> {
        self.params.iter().enumerate().map(|(i, d)| (ParamId(i), d))
    }

    /// Adds a per-sample gradient map produced by a backward pass. Call in a
    /// fixed sample order to keep accumulation reproducible.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            self.grads[id.0].add_assign(&g);
        }
    }

    /// Name of the first parameter containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.value.is_all_finite())
            .map(|p| p.name.as_str())
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sum of squares over decaying arrays, computed outside the tape
    /// (reporting only; the taped loss carries its own decay term).
    pub fn decay_sum_squares(&self) -> Real {
        self.params
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.value.data().iter().map(|v| v * v).sum::<Real>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParameterStore::new();
        let id = store.register("w", Tensor::filled(&[2, 2], 1.0), true).unwrap();
        assert_eq!(store.id_of("w"), Some(id));
        assert!(store.register("w", Tensor::zeros(&[1]), true).is_err());
        assert_eq!(store.grad(id).shape(), &[2, 2]);
    }

    #[test]
    fn accumulate_adds_in_place() {
        let mut store = ParameterStore::new();
        let id = store.register("w", Tensor::zeros(&[3]), true).unwrap();
        store.accumulate(vec![(id, Tensor::filled(&[3], 2.0))]);
        store.accumulate(vec![(id, Tensor::filled(&[3], 0.5))]);
        assert_eq!(store.grad(id).data(), &[2.5, 2.5, 2.5]);
    }
}
