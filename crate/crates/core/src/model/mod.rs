//! Acoustic model, speaker encoder and checkpoint I/O.

mod acoustic;
mod config;
mod speaker;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, DiffError, ParamStore};
use crate::signal::SignalError;

pub use acoustic::{
    group_of, AcousticModel, Dropout, Fwd, Group, PaddedBatch, SpeakerInput, Synthesis, TfItem, TfOutput, TfVars,
};
pub use config::{ModelConfig, ReconLoss, Variant};
pub use speaker::{unit, SpeakerEncoder, TdnnConfig, TdnnTrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("{0}")]
    Budget(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// What a checkpoint file carries besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: serde_json::Value,
    #[serde(default)]
    extra: serde_json::Value,
}

fn write_ckpt(
    path: &Path,
    kind: &str,
    hash: [u8; 32],
    config: serde_json::Value,
    params: &ParamStore,
    extra: serde_json::Value,
) -> Result<(), ModelError> {
    let meta = Meta {
        kind: kind.to_string(),
        config,
        extra,
    };
    let ck = Checkpoint {
        config_hash: hash,
        metadata: serde_json::to_string(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        params: params.clone(),
    };
    Ok(ck.save(path)?)
}

fn read_ckpt(path: &Path, kind: &str) -> Result<(Checkpoint, Meta), ModelError> {
    let ck = Checkpoint::load(path)?;
    let meta: Meta =
        serde_json::from_str(&ck.metadata).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
    if meta.kind != kind {
        return Err(ModelError::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            meta.kind
        )));
    }
    Ok((ck, meta))
}

/// Save an acoustic model; `extra` is stored verbatim in the metadata.
pub fn save_model(model: &AcousticModel, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
    let cfg = serde_json::to_value(&model.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    write_ckpt(path, "acoustic", model.config.arch_hash(), cfg, &model.params, extra)
}

/// Load an acoustic model. With `expected`, the stored architecture hash must
/// match unless `force` is set.
pub fn load_model(
    path: &Path,
    expected: Option<&ModelConfig>,
    force: bool,
) -> Result<(AcousticModel, serde_json::Value), ModelError> {
    let (ck, meta) = read_ckpt(path, "acoustic")?;
    let config: ModelConfig =
        serde_json::from_value(meta.config).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let mismatch = |want: [u8; 32]| ModelError::HashMismatch {
        expected: hex::encode(want),
        found: hex::encode(ck.config_hash),
    };
    if config.arch_hash() != ck.config_hash {
        return Err(ModelError::Checkpoint(format!(
            "stored config does not hash to the header value: {}",
            mismatch(config.arch_hash())
        )));
    }
    if let Some(want) = expected {
        if want.arch_hash() != ck.config_hash && !force {
            return Err(mismatch(want.arch_hash()));
        }
    }
    Ok((AcousticModel::from_parts(config, ck.params)?, meta.extra))
}

pub fn save_speaker_encoder(enc: &SpeakerEncoder, path: &Path) -> Result<(), ModelError> {
    let cfg = serde_json::to_value(&enc.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let hash = sha2_json(&cfg);
    write_ckpt(path, "tdnn", hash, cfg, &enc.params, serde_json::Value::Null)
}

pub fn load_speaker_encoder(path: &Path) -> Result<SpeakerEncoder, ModelError> {
    let (ck, meta) = read_ckpt(path, "tdnn")?;
    if sha2_json(&meta.config) != ck.config_hash {
        return Err(ModelError::Checkpoint("speaker encoder config hash mismatch".into()));
    }
    let config: TdnnConfig =
        serde_json::from_value(meta.config).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let mut enc = SpeakerEncoder::new(config, 0)?;
    if enc.params.len() != ck.params.len() {
        return Err(ModelError::Checkpoint(
            "speaker encoder parameter count mismatch".into(),
        ));
    }
    for (name, t) in ck.params.iter() {
        let id = enc.params.require(name)?;
        enc.params.set(id, t.clone())?;
    }
    Ok(enc)
}

fn sha2_json(v: &serde_json::Value) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(v.to_string().as_bytes()).into()
}
