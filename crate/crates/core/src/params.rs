//! Named parameter storage shared by layers, the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to one entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct Entry<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    /// Trainable entries are updated by the optimizer and counted as
    /// learnable parameters. Batch-norm running statistics are stored
    /// here too, but flagged non-trainable.
    pub trainable: bool,
}

/// Flat store of named tensors. Layers hold `ParamId`s into it; the
/// optimizer walks trainable entries in insertion order.
pub struct ParamStore<E> {
    pub(crate) entries: Vec<Entry<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(&value.shape);
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Mutable access to two distinct entries at once (batch-norm running
    /// mean and variance are updated together during the forward pass).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<E>, &mut Tensor<E>) {
        assert_ne!(a.0, b.0, "pair_mut requires distinct entries");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<E>) {
        self.entries[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(E::zero());
        }
    }

    /// Total scalar count across trainable entries.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Handles to every entry, in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<E>, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Overwrite an entry's value by name; shapes must match.
    pub fn load_named(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if entry.value.shape != value.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` shape mismatch: model {:?}, file {:?}",
                entry.value.shape, value.shape
            )));
        }
        entry.value = value;
        Ok(())
    }
}
