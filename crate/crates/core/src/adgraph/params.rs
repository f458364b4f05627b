use serde::{Deserialize, Serialize};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::GraphError;

/// Ordered collection of named tensors (model parameters or their gradients).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Parameter nodes of a [`ParamSet`] registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<(String, NodeId)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn ids(&self) -> &[(String, NodeId)] {
        &self.ids
    }

    /// Gradients of the bound parameters, aligned with the originating set.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        ParamSet {
            entries: self
                .ids
                .iter()
                .map(|(n, id)| (n.clone(), grads.wrt(*id)))
                .collect(),
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => *t = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every entry as a named trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            ids: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(n, t.clone())))
                .collect(),
        }
    }

    /// Registers every entry as a constant (no gradient).
    pub fn bind_const(&self, tape: &Tape) -> Bound {
        Bound {
            ids: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Concatenation of all entries in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, GraphError> {
        if flat.len() != self.num_scalars() {
            return Err(GraphError::BadLength {
                shape: vec![self.num_scalars()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let data = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            entries.push((n.clone(), Tensor::new(t.shape().to_vec(), data)?));
        }
        Ok(ParamSet { entries })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// self += factor * other (keys must align).
    pub fn axpy(&mut self, factor: f64, other: &ParamSet) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    /// Polyak averaging: self ← (1 − tau)·self + tau·other.
    pub fn soft_update(&mut self, other: &ParamSet, tau: f64) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.scaled(factor)))
                .collect(),
        }
    }
}
