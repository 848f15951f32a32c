//! Desk-scale experiment engine: dataset synthesis, training, the ablation
//! ladder, spatial shuffling, sensitivity sweeps, and perturbation
//! robustness.
//!
//! Independent (config, seed) runs execute in parallel worker threads and
//! merge in deterministic order; within a run, training is sequential.
//! Every experiment is reproducible bit-for-bit from (config, seed).

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod parallel;
pub mod perturb;
pub mod sensitivity;
pub mod train;

pub use ablation::{ablation_ladder, shuffle_ablation, AblationResult, LadderStep, ShuffleMode};
pub use config::ExperimentConfig;
pub use dataset::{make_dataset, Dataset};
pub use perturb::{perturbation_sweep, PerturbRow};
pub use sensitivity::{sensitivity_sweep, Knob, SensitivityRow};
pub use train::{denoise_image, evaluate, train, train_on, TrainedModel};
