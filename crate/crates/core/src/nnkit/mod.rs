//! Minimal differentiable-computation kernel.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, Objective};
pub use graph::{Bound, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{init, ParamSet};
pub use tensor::{Scalar, Tensor};
