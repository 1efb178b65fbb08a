//! Synthetic data, distribution metrics, the FLOP cost model, experiment
//! configs and end-to-end runs.

pub mod config;
pub mod cost;
pub mod dataset;
pub mod experiment;
pub mod metrics;

pub use config::ExperimentConfig;
pub use cost::{flops_cost, token_count, CostModelParams, CostStage};
pub use dataset::{synth_dataset, DatasetSpec, GeneratorKind};
pub use experiment::{run_experiment, run_training, ExperimentReport, StageStart};
pub use metrics::{eval_metrics, MetricsReport};
