//! Optimization of the transfer model: alternating discriminator and
//! encoder/generator updates with Adam.

mod config;
mod optim;
mod train;

pub use config::TrainConfig;
pub use optim::{adam_step, clip_grad_norm, AdamState};
pub use train::{
    evaluate_objective, metrics_csv, objective, train, train_step, train_step_discriminator, train_step_generator,
    transfer_accuracy_with, EpochMetrics, GeneratorStep, Objective, Optimizers, SoftBatch, TrainCorpora, TrainOutcome,
    METRICS_HEADER,
};
