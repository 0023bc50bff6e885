//! Identity-balanced sampling, the SGD schedule and the training loop.

mod config;
mod sampler;
mod sgd;
mod trainer;

pub use config::TrainConfig;
pub use sampler::{BatchSpec, PkSampler};
pub use sgd::{lr_at, sgd_step};
pub use trainer::{shield_batch, write_loss_trace, EpochLosses, StepReport, TrainSet, Trainer};
