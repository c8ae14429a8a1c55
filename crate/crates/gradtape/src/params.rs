//! Named parameter storage, decoupled from any single tape.
//!
//! A [`ParamStore`] owns the persistent weights of a model. Each forward pass
//! binds the whole store onto a fresh [`Tape`] ([`ParamStore::bind`]), which
//! yields a [`Bindings`] map from stable [`ParamId`]s to that tape's leaf ids.
//! Parameters marked `trainable = false` are bound without gradient tracking,
//! so they can never receive updates.

use crate::scalar::Real;
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
    #[error("parameter {name:?}: shape mismatch, stored {stored:?} vs incoming {incoming:?}")]
    ShapeMismatch { name: String, stored: Vec<usize>, incoming: Vec<usize> },
}

/// Stable handle into a [`ParamStore`], valid for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> Result<ParamId, StoreError> {
        if self.index.contains_key(name) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id.0);
        self.params.push(Parameter { name: name.to_string(), tensor, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Flip trainability by name prefix; returns how many parameters matched.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Bind every parameter as a leaf on `tape`. Trainable parameters track
    /// gradients; frozen ones are constants for this pass.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Bindings, TapeError> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(p.tensor.clone(), p.trainable)?);
        }
        Ok(Bindings { ids })
    }
}

/// Per-tape leaf ids for a bound [`ParamStore`].
pub struct Bindings {
    ids: Vec<ValueId>,
}

impl Bindings {
    pub fn id(&self, param: ParamId) -> ValueId {
        self.ids[param.0]
    }
}
