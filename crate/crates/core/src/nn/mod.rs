//! Network definition: configuration, parameters, embedders and the model.

pub mod config;
pub mod embed;
pub mod model;
pub mod params;

pub use config::{ModelConfig, NUM_STAGES, PRESETS, TIMESTEP_FREQ_DIM};
pub use embed::{drop_labels, sinusoidal_embedding};
pub use model::{
    cca, resample, skip_fuse, ConvLayer, ConvModule, DiCo, DiCoBlock, Ffn, NetOutput,
    NetOutputVars, Resample, Stage, Trace,
};
pub use params::{trunc_normal, BoundParams, ParamId, ParamStore};
