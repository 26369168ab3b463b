//! Post-training quantization simulation, prediction-swap statistics and
//! calibration analysis for small CNNs on CIFAR.

pub mod cli;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod swap;
pub mod tensor;
pub mod trainer;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Bundle(#[from] model::BundleError),
    #[error(transparent)]
    Quant(#[from] quant::QuantError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Swap(#[from] swap::SwapError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Model(_) => "model",
            Error::Bundle(_) => "bundle",
            Error::Quant(_) => "quant",
            Error::Metrics(_) => "metrics",
            Error::Dataset(_) => "dataset",
            Error::Swap(_) => "report",
            Error::Train(_) => "train",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
