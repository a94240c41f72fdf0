//! Experiment harness: synthetic and on-disk datasets, optimizers, metrics,
//! the training loop, the loss-combination ablation and the oracle suite.

pub mod ablate;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod train;
pub mod verify;
