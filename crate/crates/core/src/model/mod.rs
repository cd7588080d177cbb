//! The segmentation network: a kNN point embedding, a backbone of layers
//! that alternate spatial mixing on a 2D view with per-point channel
//! mixing, and a pointwise classification head.

pub mod checkpoint;
mod config;
mod network;
mod params;

pub use config::{ModelConfig, NEIGHBOR_HIDDEN};
pub use network::{
    argmax_labels, channel_mix, embed, forward, predict, predict_timed, segment, spatial_mix, BnUpdate, Embedding,
    ForwardOutput, Mode, PreparedCloud, Segmentation, StageTimes,
};
pub use params::{param_specs, BoundParams, Init, ModelParams, ParamSpec};

#[cfg(test)]
mod tests;
