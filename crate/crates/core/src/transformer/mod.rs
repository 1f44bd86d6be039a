//! Toy Transformer encoder in four normalization setups: post-LN, pre-LN,
//! σReparam without LN, and σReparam with post-LN.
//!
//! Weights act on the right (`y = x W + b`). Token and learned position
//! embeddings are summed, each block is attention then a GELU MLP with
//! residual connections, and a linear head reads either every position or
//! the mean-pooled sequence.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{ModelConfig, NormMode, OutputMode};
pub use model::{
    argmax, Batch, ForwardOutput, LayerSnapshot, Mode, Model, Param, StepOutput, Targets,
};
