//! Desk-scale sequence-to-sequence Transformer workbench for comparing
//! position representations: sinusoidal absolute embeddings (APE), shifted
//! absolute embeddings (SHAPE), and relative position embeddings (RPE).
//!
//! Everything numeric is generic over the scalar type via [`Scalar`];
//! training runs in `f32`, while the finite-difference gradient oracle
//! instantiates the same code in `f64`. Concrete aliases for both live at
//! the crate root.

pub mod analysis;
pub mod bleu;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod position;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient-check oracle.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision autodiff graph.
pub type Graph32 = graph::Graph<f32>;
/// Double-precision autodiff graph.
pub type Graph64 = graph::Graph<f64>;
/// Training-precision model parameters.
pub type ModelState32 = model::ModelState<f32>;
/// Double-precision model parameters.
pub type ModelState64 = model::ModelState<f64>;
