//! Multilayer perceptrons with layer normalization and dropout, a two-tower
//! interaction network, AdamW training and stage-wise structured fitting.

mod checkpoint;
mod mlp;
mod model;
mod structured;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use mlp::{Activation, MlpSpec, OutputKind};
pub use model::{
    build_env_encoder, build_genotype_encoder, EncoderConfig, EncoderData, EncoderModel, Network, PairData, Profile,
    Samples, TwoTowerModel, EMBEDDING_DIM,
};
pub use structured::{structured_fit, Recomposition, StructuredConfig, StructuredFit, StructuredModel};
pub use train::{evaluate_mse, gradient_check, gradient_error, train, write_trace, Optimizer, TraceRow, TrainConfig};
