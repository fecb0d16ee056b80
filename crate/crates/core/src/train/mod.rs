//! Optimizer, EMA, toy data, checkpoints and the training step.

mod checkpoint;
mod data;
mod ema;
mod optim;
mod step;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{
    classify_orientation, decode_dataset, encode_dataset, hflip_augment, make_toy_data,
    read_dataset, write_dataset, ToyDataset, ToySpec, DATASET_MAGIC, DATASET_VERSION,
};
pub use ema::{ema_update, EmaState};
pub use optim::{adamw_step, OptimizerState};
pub use step::{train_step, StepLosses, TrainConfig, Trainer};
