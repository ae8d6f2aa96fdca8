//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn_scaled(shape, std, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Replaces every tensor with the same-named one from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format("parameters", format!("expected {} blocks, found {}", self.len(), other.len())));
        }
        for (name, t) in other {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::format("parameters", format!("unknown block {name}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::shape("load parameters", self.tensors[i].shape(), t.shape()));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

/// Per-tape view of a store: each parameter becomes one tape node on first use.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    /// Parameters become differentiable leaves.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Bound { store, vars: vec![None; store.len()], trainable: true }
    }

    /// Parameters become constants.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Bound { store, vars: vec![None; store.len()], trainable: false }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { tape.leaf(value) } else { tape.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the store; unused parameters get zeros.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let grads = self
            .store
            .tensors()
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| v.and_then(|v| tape.grad(v)).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Gradients(grads)
    }
}

/// One gradient tensor per store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.0 {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}
