//! Dense 64-bit tensors with reverse-mode gradient accumulation.
//!
//! Everything numeric in the detector runs through this module: a flat
//! row-major [`Tensor`], a [`Tape`](tape::Tape) that records the forward
//! pass and replays it in reverse, a finite-difference verifier
//! ([`grad_check`](gradcheck::grad_check)), and a flat binary checkpoint
//! format for parameter sets.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_multi};
pub use params::{ParamSet, TapeBinding};
pub use tape::{OpKind, Tape, TensorId};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// A tensor that `requires_grad` carries a same-shape gradient
/// accumulator; gradients accumulate across backward passes until
/// [`Tensor::zero_grad`] is called.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating that the data length matches the shape
    /// product and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} implies {} elements, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal(0, std^2) initialization (Box-Muller).
    pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Self {
        let n = numel_of(&shape);
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
            })
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Enable or disable gradient tracking. Enabling allocates the
    /// accumulator; disabling drops it.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if flag {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let acc = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::invalid("accumulate_grad on tensor without requires_grad"))?;
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }
}
