//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! The engine is an eager tape: every operation computes its value
//! immediately and records enough state to replay the chain rule in
//! reverse. It is deliberately minimal, carrying only the operations the
//! dynamic network needs, and fully deterministic: fixed loop orders, no
//! parallel reductions.

mod graph;

pub mod check;

pub use graph::{Graph, Var};

use crate::error::{bail, Result};

/// Element type for tensors and graphs.
///
/// Training runs in `f32`; every gradient check runs the same code in
/// `f64`, where central-difference tolerances are actually reachable.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for casting an `f64` literal into the active precision.
pub(crate) fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("literal out of range for scalar type")
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// An n-dimensional array of real values, optionally carrying a gradient
/// of the same shape after a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![S::zero(); numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if data.len() != numel(shape) {
            bail!(
                Dim,
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                numel(shape)
            );
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable element access; the shape (and hence the length) is fixed.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    /// Adds `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        if delta.len() != self.data.len() {
            bail!(
                Dim,
                "gradient length {} does not match tensor of {} elements",
                delta.len(),
                self.data.len()
            );
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts every element (and any gradient) into another precision.
    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| {
                g.iter()
                    .map(|v| T::from_f64(v.to_f64().unwrap()).unwrap())
                    .collect()
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn grad_accumulates_by_summation() {
        let mut t = Tensor::<f64>::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn convert_round_trips_shape() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d: Tensor<f64> = t.convert();
        assert_eq!(d.shape(), &[2, 2]);
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
