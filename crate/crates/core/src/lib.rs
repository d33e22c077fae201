//! Network-constrained Tucker decomposition of sparse tensors.
//!
//! A sparse N-mode tensor is factorized into a small dense core and one
//! factor matrix per mode by lock-free parallel SGD, optionally pulling the
//! factor rows of graph-adjacent entities together. Trained models support
//! folding in new entities, nearest-neighbor search over latent profiles,
//! per-entity subtype matrices and k-means stratification.

pub mod cli;
pub mod cluster;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod query;
pub mod tensor;

pub use engine::{orthogonalize, train, train_with, EpochRecord, StepParams, TrainReport};
pub use error::{Error, Result};
pub use model::{Objective, TrainConfig, TuckerModel};
pub use tensor::{ConstraintGraph, DenseTensor, Edge, FrobeniusNorm, Matrix, SparseTensor};
