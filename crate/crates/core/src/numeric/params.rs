use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Same shape as `value`; zeroed by [`ParamStore::zero_grad`].
    pub grad: Tensor,
}

/// Named parameters in registration order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(TensorError::DuplicateParameter(name));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale · grads` into the stored accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Replaces values by name from `(name, tensor)` pairs; every stored
    /// parameter must be covered with the same shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<(), TensorError> {
        if values.len() != self.params.len() {
            return Err(TensorError::Invalid { op: "load_values", message: "parameter count differs" });
        }
        for (name, t) in values {
            let id = self.find(&name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch { op: "load_values", left: p.value.shape(), right: t.shape() });
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Sparse-by-parameter gradient buffer filled by [`super::Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients { grads: alloc::vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Value of one coordinate, zero when the parameter received nothing.
    pub fn at(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |t| t.data()[index])
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub(crate) fn add_owned(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Elementwise `self += other`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_into(ParamId(i), g);
            }
        }
    }

    /// Corrupts every stored gradient; used to test the checker itself.
    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v = f(*v);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(self.grads.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum())
    }
}
