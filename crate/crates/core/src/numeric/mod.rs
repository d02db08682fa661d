//! Tensors, reverse-mode differentiation, MLPs and Adam.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;
pub mod tensor;
pub mod vexp;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use mlp::{Activation, Dense, Mlp, MlpBinding};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
