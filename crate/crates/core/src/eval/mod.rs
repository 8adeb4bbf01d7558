//! Disentanglement probe, synthesis metrics, reports and embedding export.

mod embed;
mod probe;
mod report;

use crate::cloning::CloningError;
use crate::corpus::CorpusError;
use crate::diffcore::DiffError;
use crate::model::ModelError;
use crate::signal::SignalError;

pub use embed::{export_embeddings, EmbeddingRow, Pca};
pub use probe::{latent_probe_data, mel_probe_data, probe_accuracy, ProbeConfig, ProbeData, ProbeResult};
pub use report::{
    edge_pad, evaluate_synthesis, mean_std, EvalReport, EvalRow, SynthesisMetrics, CEPSTRAL_ORDER, REPORT_JSONL,
    REPORT_TABLE,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("probe labels are imbalanced: {0:.3} positive, allowed 0.45..=0.55")]
    Imbalance(f64),
    #[error("input hash mismatch: {0}")]
    HashMismatch(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cloning(#[from] CloningError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl From<DiffError> for EvalError {
    fn from(e: DiffError) -> Self {
        EvalError::Model(ModelError::Diff(e))
    }
}
