//! Named parameter storage and its binding onto a tape.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use serde::{Deserialize, Serialize};

use crate::numerics::{RngState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut RngState) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), rng.normal_vec(n, std)).expect("shape matches draw");
        self.add(name, t)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), crate::NumericsError> {
        if tensors.len() != self.tensors.len() {
            return Err(crate::NumericsError::Contract("parameter count mismatch"));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(crate::NumericsError::ShapeMismatch {
                    op: "set_tensors",
                    left: old.shape().to_vec(),
                    right: new.shape().to_vec(),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], in id order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after `tape.backward`, zero-filled for untouched parameters.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
