//! Training, evaluation and prediction entry points.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{ConfigOverrides, OptimConfig, RunConfig};
pub use eval::{evaluate, evaluate_model, predict, score, upsample_mask, Prediction};
pub use optim::{clip_global_norm, Adam};
pub use train::{accumulate_sample, train, write_loss_log, EpochLog, SampleStep, Trainer, CHECKPOINT_FILE, LOSS_LOG_FILE};
