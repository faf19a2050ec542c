//! Parametric activation functions, adversarial attacks, adversarial
//! training and robustness measurement on a small reverse-mode autodiff core.

// NaN-rejecting checks are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod rng;
pub mod tensor;
pub mod training;

pub use activations::{ActivationSpec, Family, Grid};
pub use attacks::{AttackFamily, AttackSpec, Norm};
pub use data::Dataset;
pub use error::{Error, Result};
pub use nnet::{Model, Network};
pub use tensor::{Graph, Tensor, Var};
