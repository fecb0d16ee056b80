//! Cost counters, channel activation scores, the attention baseline,
//! throughput timing and image output.

mod activations;
mod attention;
mod bench;
mod cost;
mod image;

pub use activations::{
    channel_activation_scores, model_channel_scores, ChannelActivationReport, SCORE_REDUCTION,
};
pub use attention::{AttentionOutput, SelfAttention};
pub use bench::{bench_csv, throughput_bench, BenchRow, BenchSpec, BlockKind};
pub use cost::{
    attention_macs, conv_module_macs, count_dico, count_dit, count_preset, enumerate_config,
    enumerate_dico, CostReport, CostRow, DitSpec, DIT_PRESETS, MAC_CONVENTION,
};
pub use image::{encode_pnm, image_grid, to_byte};
