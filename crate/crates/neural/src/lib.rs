//! Minimal tensor/autodiff core and the encoder-decoder transcription
//! model with its domain discriminator.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NeuralError, Result};
pub use graph::{bce_value, sigmoid, Graph, Var};
pub use model::{sinusoidal_positions, CrossMemory, DecodeState, ModelConfig, Scope, TranscriptionModel};
pub use optim::{Adam, AdamConfig};
pub use params::{xavier_uniform, Gradients, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
