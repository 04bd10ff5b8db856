//! Residual 1-D CNN that maps a one-second waveform to a posterior over the
//! filter bank.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod real;
pub mod train;

pub use checkpoint::{load_model, load_model_for, save_model};
pub use model::{argmax, build_default_model, ArchDescriptor, CnnModel, Gradients, TensorKind};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use real::Real;
pub use train::{
    evaluate, run_scheme, samples_from_tracks, train, train_observed, write_metrics_csv, EpochMetrics, Sample, Scheme,
    SchemeOutcome, TrainConfig, TrainOutcome,
};
