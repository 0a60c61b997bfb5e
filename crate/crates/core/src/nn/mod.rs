//! Differentiable building blocks: a reverse-mode tape, convolutional
//! residual blocks, self-attention with a dynamic positional bias, and the
//! Adam/AdamW optimizers.

mod checkpoint;
mod graph;
mod layers;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Graph, Var};
pub use layers::{
    attention, sinusoidal_embed, Conv1d, ConvBlock, DpbConfig, GroupNorm, DynamicPositionBias, Resample, SelfAttention,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Grads, ParamId, ParamStore};
