//! Teacher-student joint speech-text embeddings at desk scale.
//!
//! A frozen text encoder (the teacher) defines an embedding space; a
//! convolutional-transformer encoder over frame sequences (the student) is
//! trained to land each utterance on the embedding of its transcription.
//! Alongside training the crate ships the analysis instruments: bidirectional
//! retrieval, zero-shot classification, and probing classifiers reused across
//! modalities.

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision of the training stack.
pub type Real = f64;
pub type Tensor = numerics::Tensor<Real>;
pub type Tape = numerics::Tape<Real>;
pub type ParamStore = numerics::ParamStore<Real>;
pub type ModelBundle = models::ModelBundle<Real>;
