//! Dual-view multi-label chest x-ray classification.
//!
//! A frontal (PA or AP) and a lateral radiograph are encoded by two
//! independent DenseNet branches whose pooled features are concatenated and
//! mapped to 14 sigmoid outputs. Around the model sit the pieces needed to
//! train and evaluate it: 12-bit image ingestion and transforms, a rule-based
//! report labeler, subject-disjoint splitting, stratified mini-batches, Adam
//! with a Triangular2 cyclic learning rate, and per-class ROC AUC.
//!
//! Numeric code is generic over [`Scalar`]; the `*32`/`*64` aliases below fix
//! the element type.

pub mod checkpoint;
pub mod classes;
pub mod densenet;
pub mod dualnet;
pub mod error;
pub mod image;
pub mod labeler;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod scalar;
pub mod split;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type SingleViewModel32 = densenet::SingleViewModel<f32>;
pub type SingleViewModel64 = densenet::SingleViewModel<f64>;
pub type DualNetModel32 = dualnet::DualNetModel<f32>;
pub type DualNetModel64 = dualnet::DualNetModel<f64>;
