//! Training, evaluation, attention dumps and experiment suites.

mod attention;
mod config;
mod eval;
mod suite;
mod train;

pub use attention::{attention_maps, attention_probe, dump_attention, write_attention_maps, AttentionMap, ProbeReport};
pub use config::{ExperimentConfig, THREADS_ENV};
pub use eval::{
    evaluate_answerer, evaluate_checkpoint, evaluate_model, Answerer, ConstantShim, ModelAnswerer, OracleShim,
    SplitMetrics,
};
pub use suite::{run_suite, CellStats, SuiteOptions, SuiteResult, SuiteRow, SUITES};
pub use train::{load_dataset, train, train_on, Dataset, EpochMetrics, MetricsRecord, TrainOutcome};

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("data audit failed: {0}")]
    Audit(String),
    #[error("non-finite loss {loss} at epoch {epoch} step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error("sample {sample} executed {found} layers, expected {expected}")]
    LayerBudget {
        sample: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(DataError),
    #[error("{0}")]
    Io(String),
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Audit(m) => HarnessError::Audit(m),
            e => HarnessError::Data(e),
        }
    }
}

impl HarnessError {
    /// Process exit code: 1 usage and other errors, 2 data audit, 3
    /// numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Audit(_) => 2,
            HarnessError::NonFinite { .. } | HarnessError::LayerBudget { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Worker threads for evaluation, from the environment; at least 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
