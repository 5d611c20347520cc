//! Teacher text encoder, student speech encoder with convolutional
//! downsampling, projection head, and the recognition decoder.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod layers;

#[cfg(test)]
mod tests;

pub use bundle::{ModelBundle, SpeechEncoder, SpeechStates, StudentInit};
pub use checkpoint::{init_bundle, InitMode};
pub use config::{ConvSpec, DecoderConfig, ModelConfig, ProjectionHeadConfig, SpeechEncoderConfig, TextEncoderConfig};
