//! Numerical core for label pruning in large-scale dataset distillation.
//!
//! The crate is `no_std` with `alloc`. It holds everything that is pure
//! computation: a small reverse-mode differentiation engine with the layers
//! of a BN-bearing convolutional classifier, class-wise BatchNorm statistics
//! and their update-count bound, teacher training and statistics estimation,
//! pixel-space dataset synthesis, augmentation and soft-label generation,
//! label pruning, student validation and the diversity measures.
//!
//! File formats, image IO, reports and the command line live in the `lpld`
//! crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod classwise_bn;
pub mod data;
pub mod digest;
pub mod diversity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labelpool;
pub mod nn;
pub mod optim;
pub mod real;
pub mod recover;
pub mod relabel;
pub mod rng;
pub mod squeeze;
pub mod tensor;
pub mod validate;

pub use classwise_bn::{BnLayerState, BoundInputs, StatsMode, UpdateBound};
pub use data::{LabeledDataset, SyntheticSpec};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{LayerSpec, Mode, Model, NetworkSpec, ParameterSet};
pub use real::Real;
pub use tensor::Tensor;
