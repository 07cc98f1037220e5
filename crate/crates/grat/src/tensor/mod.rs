//! Dense f64 tensors with a recording tape for reverse-mode differentiation.
//!
//! The kernel is deliberately small: row-major storage, rank <= 3, no
//! broadcasting beyond scalars, and one op set sufficient for a gated
//! transformer decoder and its training loop. Every operation goes through
//! [`Tape`], which records parents and enough state to replay the chain rule
//! in reverse. A tape and its tensors form a single-owner unit; tensors
//! themselves are plain values and can move freely between threads.

pub mod check;
mod tape;

pub use check::{grad_check, grad_check_report, GradCheckEntry};
pub use tape::{NodeId, Tape};

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tensor_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle tying a tensor to the tape node that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeHandle {
    pub(crate) tape_uid: u64,
    pub(crate) node: NodeId,
}

/// Dense rank <= 3 array of f64 in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    node: Option<TapeHandle>,
}

impl Tensor {
    /// A tensor from explicit values; rejects rank > 3, zero dims, length
    /// mismatches and non-finite entries.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::BadShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "rank must be 1..=3",
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "zero dimension",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::BadShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "values length != product of shape",
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            id: fresh_tensor_id(),
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            node: None,
        })
    }

    pub(crate) fn from_op(values: Vec<f64>, shape: Vec<usize>, handle: TapeHandle) -> Self {
        Tensor {
            id: fresh_tensor_id(),
            shape,
            values,
            requires_grad: false,
            node: Some(handle),
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    /// Marks the tensor as a gradient leaf. Consumes and returns for chaining.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values; used by optimizers between tapes.
    /// Any tape binding recorded for the old values is not invalidated, so
    /// callers must only mutate tensors that are not live on a tape.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    /// Entry (i, j) of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.values[i * self.shape[1] + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn tensor_id(&self) -> u64 {
        self.id
    }

    pub fn tape_handle(&self) -> Option<TapeHandle> {
        self.node
    }

    /// A copy cut loose from any tape: fresh identity, no node, no grad flag.
    pub fn detach(&self) -> Tensor {
        Tensor {
            id: fresh_tensor_id(),
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// Same data viewed under a compatible shape (equal numel), detached
    /// from any tape. Plumbing for moving between vector and matrix views.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "numel mismatch",
            });
        }
        Tensor::new(self.values.clone(), shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_four() {
        assert!(matches!(
            Tensor::new(vec![0.0; 16], &[2, 2, 2, 2]),
            Err(Error::BadShape { .. })
        ));
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![1.0, f64::NAN], &[2]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn detach_drops_tape_identity() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().requiring_grad();
        let d = t.detach();
        assert!(!d.requires_grad());
        assert!(d.tape_handle().is_none());
        assert_ne!(d.tensor_id(), t.tensor_id());
        assert_eq!(d.values(), t.values());
    }
}
