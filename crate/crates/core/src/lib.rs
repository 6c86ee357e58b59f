//! Supervised variational auto-encoder whose latent space is split into
//! classifier dimensions and nuisance dimensions, plus the tooling to probe
//! what the classifier is invariant to.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod export;
pub mod invariance;
pub mod mlp;
pub mod models;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_difference, BoundParams, Gradients, ParamId, ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
