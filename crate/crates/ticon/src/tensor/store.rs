//! Named parameter storage shared by the contextualizer and the aggregator.
//!
//! Parameters live in a flat insertion-ordered store; model layouts keep
//! [`ParamId`] handles into it. Binding a store onto a [`Tape`] inserts every
//! tensor as a leaf in store order, which fixes the gradient accumulation
//! order and makes runs bitwise reproducible.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| n == &name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Insert every parameter as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.bind_where(tape, &|_| trainable)
    }

    /// Insert every parameter as a tape leaf; `trainable` picks which store
    /// indices track gradients (frozen tensors become constants).
    pub fn bind_where(&self, tape: &mut Tape, trainable: &dyn Fn(usize) -> bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Round every tensor to f32 and back, the storage precision of
    /// checkpoints. Applied at checkpoint boundaries so a restored run sees
    /// exactly the state the live run continued from.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Tape variables for a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Assemble a binding from explicit vars (test harnesses splice a checked
    /// tensor in place of a stored parameter this way).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter in store order (None where untracked).
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()
    }
}
