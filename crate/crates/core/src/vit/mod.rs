//! The compact vision transformer: configuration, parameters, the recorded
//! forward pass, and a small SGD trainer for toy checkpoints.

pub mod config;
pub mod layer;
pub mod model;
pub mod params;
pub mod train;

pub use config::ViTConfig;
pub use layer::{BlockLayer, LayerId};
pub use model::{
    forward, forward_with, logits, patchify, ActivationRecord, BlockVars, Forward, SiteHook,
};
pub use params::{BlockParams, LayerNormParams, LinearParams, OutlierOptions, ViTParams};
pub use train::{accuracy, cross_entropy, train_toy, TrainLog, TrainOptions};
