//! Objectives, optimization and training runs.

mod checkpoint;
mod config;
pub mod objective;
mod optim;
mod run;

pub use checkpoint::{config_hash, Checkpoint};
pub use config::{Objective, TrainConfig};
pub use objective::{
    composite_loss, loss_and_grads, members, BatchLoss, DropoutSpec, LossOptions, Member,
};
pub use optim::{adam_step, clip_gradients, AdamConfig, AdamState};
pub use run::{train, EpochRecord, Trainer};
