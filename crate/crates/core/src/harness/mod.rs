//! Experiment harness: configuration, optimization, training, evaluation,
//! throughput benchmarking, analyses, and the command-line interface.

pub mod analyze;
pub mod bench;
pub mod cli;
pub mod config;
pub mod optim;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("train error: {0}")]
    Train(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub use bench::{bench_throughput, BenchResult};
pub use config::{Mode, PolicyObjective, RunConfig};
pub use train::{eval_split, infer_mode, train_loop, MetricsRecord, TrainOutcome};
