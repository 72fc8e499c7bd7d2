use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// Handle of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named trainable tensors plus their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, grad: None });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0];
        ensure!(
            cur.value.shape() == value.shape(),
            Dimension,
            "parameter {} has shape {:?}, got {:?}",
            cur.name,
            cur.value.shape(),
            value.shape()
        );
        cur.value = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn has_grads(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(acc) => crate::numerics::kernels::add_into(acc, g),
            None => e.grad = Some(g.to_vec()),
        }
    }

    pub fn set_grad(&mut self, id: ParamId, g: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        ensure!(g.len() == e.value.numel(), Dimension, "gradient length mismatch for {}", e.name);
        e.grad = Some(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Mutable access to value and gradient together, used by the optimizer.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, Option<&mut Vec<f64>>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, e.grad.as_mut())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let Some(&j) = other.by_name.get(&e.name) else {
                return Err(Error::Contract(format!("parameter {} missing in source store", e.name)));
            };
            let src = &other.entries[j].value;
            ensure!(src.shape() == e.value.shape(), Dimension, "shape mismatch for {}", e.name);
            e.value = src.clone();
        }
        Ok(())
    }
}
