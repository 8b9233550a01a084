//! Named persistent tensors that outlive a single tape.

use indexmap::IndexMap;

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Role of a stored tensor. Determines which optimizer touches it and which
/// training phase may change it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Network weights, batch-norm affine terms.
    Weight,
    /// Learnable activation clipping bound.
    Alpha,
    /// Architecture logits.
    Theta,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, (ParamKind, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, (kind, value));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    /// Replaces the value stored under `name`, keeping its kind. Shapes must
    /// agree.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some((_, slot)) = self.entries.get_mut(name) else {
            return Err(Error::invalid(format!("unknown parameter `{name}`")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, (k, t))| (n.clone(), (*k, t.cast())))
                .collect(),
        }
    }

    /// Copies every stored tensor onto `tape`. Tensors whose kind satisfies
    /// `trainable` become gradient-carrying leaves, all others constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamKind) -> bool) -> Binding {
        let vars = self
            .entries
            .values()
            .map(|(kind, t)| {
                if *kind != ParamKind::Buffer && trainable(*kind) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Pairs every parameter with its gradient, skipping those without one.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| grads.take(v).map(|g| (ParamId(i), g)))
            .collect()
    }
}
