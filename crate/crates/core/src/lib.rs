//! Hierarchical graph learning on tribe-style graphs.
//!
//! A tribe-style graph is a sparse global graph over listed companies where
//! every company also owns a small directed investment graph (its tribe).
//! The model encodes each tribe with a GIN over structural embeddings, fuses
//! the result with the company's attributes, propagates over the global graph
//! and predicts a binary risk label.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix the
//! common choices.

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod features;
pub mod graph;
pub mod init;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod training;
pub mod tse;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
