//! Dynamic domain generalization with parameter exchange.
//!
//! A self-contained library for per-instance dynamic convolutions whose
//! kernels are assembled from a shared static component plus
//! coefficient-weighted asymmetric templates, trained with joint
//! perturbed/non-perturbed objectives under leave-one-domain-out
//! protocols, with disentanglement diagnostics.

pub mod analysis;
pub mod data;
pub mod dynconv;
pub mod error;
pub mod harness;
pub mod perturb;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
