//! Named parameter collections and their tape bindings.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Ordered set of named, gradient-tracked tensors. Iteration order is
/// insertion order, which the checkpoint format and EMA updates rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

/// Tape leaf ids for one [`ParamSet`], parallel to its entries.
pub struct TapeBinding {
    ids: Vec<TensorId>,
}

impl TapeBinding {
    pub fn id(&self, param: usize) -> TensorId {
        self.ids[param]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter; `requires_grad` is forced on. Returns its
    /// stable index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let idx = self.names.len();
        self.by_name.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        TapeBinding {
            ids: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Like [`ParamSet::bind`] but without gradient tracking (teacher
    /// inference, evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> TapeBinding {
        TapeBinding {
            ids: self
                .tensors
                .iter()
                .map(|t| {
                    let frozen = t.clone().with_requires_grad(false);
                    tape.leaf(&frozen)
                })
                .collect(),
        }
    }

    /// Pull gradients off a tape into the parameter accumulators.
    pub fn accumulate_from_tape(&mut self, tape: &Tape, binding: &TapeBinding) -> Result<()> {
        for (idx, t) in self.tensors.iter_mut().enumerate() {
            if let Some(g) = tape.grad(binding.ids[idx]) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Same names, same shapes, same order.
    pub fn congruent_with(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if !self.congruent_with(other) {
            return Err(Error::invalid(
                "copy_values_from between non-congruent parameter sets".to_string(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Euclidean distance between two congruent parameter sets.
    pub fn l2_distance(&self, other: &ParamSet) -> Result<f64> {
        if !self.congruent_with(other) {
            return Err(Error::invalid(
                "l2_distance between non-congruent parameter sets".to_string(),
            ));
        }
        let mut acc = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}
