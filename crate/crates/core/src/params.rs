use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

/// A named tensor with its accumulated gradient.
///
/// Non-trainable entries are buffers (batch-norm running statistics); they
/// are checkpointed but never receive gradients or optimizer updates.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every parameter and buffer of one network.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grad`] is called explicitly.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { tag: self.tag, params: self.params.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param { name, value, grad, trainable });
        ParamId { store: self.tag, index: self.params.len() - 1 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.tag, "parameter handle from another store");
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.check(id);
        &self.params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        &mut self.params[id.index].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.get(id).grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        &mut self.params[id.index].grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|index| ParamId { store: self.tag, index })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.tag, index })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every tape leaf bound to this store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (var, id) in tape.param_leaves() {
            if id.store != self.tag {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                let dst = self.params[id.index].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// Replaces every value by name, requiring identical names and shapes.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, value)) in self.params.iter().zip(values) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, value)) in self.params.iter_mut().zip(values) {
            p.value = value.clone();
        }
        Ok(())
    }
}
