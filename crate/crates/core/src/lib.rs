//! Byte-level recursive convolutional autoencoder for text.
//!
//! Text is treated as raw bytes, one-hot encoded, and compressed into a
//! fixed 1024-dimensional code by a convolutional encoder whose pooling group
//! is applied recursively with shared weights; a mirrored decoder expands the
//! code back to the padded input length. The crate bundles its own small
//! reverse-mode autodiff engine, the training loop, an LSTM baseline and the
//! evaluation experiments.

pub mod beam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{prepare, ByteSample, Corpus, Decoded};
pub use error::{CheckpointError, Error, Result};
pub use graph::{Graph, NodeId, OpKind};
pub use layers::{PoolKind, ShuffleOrder};
pub use model::{param_layer_count, recursion_count, BrcaConfig, BrcaModel};
pub use params::{ParamGrads, ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{lr_at, TrainConfig, Trainable, Trainer};
