use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Learnable tensors keyed by unique name, iterated in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

/// Name, shape and values of one parameter; the persisted form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        ensure!(!self.by_name.contains_key(name), "duplicate parameter name `{name}`");
        ensure!(value.is_finite(), "parameter `{name}` has non-finite values");
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, grad: None });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Sets every gradient to an all-zero buffer.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().fill(0.0),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, f: impl FnOnce(&mut [f64])) {
        let p = &mut self.params[id.0];
        let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        f(grad.data_mut());
    }

    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum();
        math::sqrt(sq)
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn export(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a persisted list. Every registered parameter
    /// must be present with a matching shape, and no extra names are allowed.
    pub fn import(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        ensure!(
            tensors.len() == self.params.len(),
            "expected {} parameters, got {}",
            self.params.len(),
            tensors.len()
        );
        for t in tensors {
            let id = self.id(&t.name);
            ensure!(id.is_some(), "unknown parameter `{}`", t.name);
            let p = &mut self.params[id.unwrap().0];
            ensure!(
                p.value.shape() == t.shape.as_slice(),
                "parameter `{}` has shape {:?}, stored {:?}",
                t.name,
                p.value.shape(),
                t.shape
            );
            p.value = Tensor::new(t.shape.clone(), t.values.clone())?;
        }
        Ok(())
    }
}
