//! The Permuted MNIST and warm-starting protocols.

pub mod config;
mod protocols;
mod training;

pub use config::{ExperimentConfig, Protocol, DATA_DIR_ENV};
pub use protocols::{
    load_cifar, load_mnist, run, run_continual, run_first_task_sweep, run_nc1_thresholds,
    run_warmstart, threshold_search, train_to_nc1_threshold, ThresholdHit, ThresholdOutcome,
};
pub use training::{
    measure, plasticity_probe, train_epoch, EpochKey, EpochSummary, ProbeEval, TrainSettings,
};
