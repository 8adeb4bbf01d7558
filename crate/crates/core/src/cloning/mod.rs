//! Base training with the adversarial noise classifier, few-shot adaptation
//! and one-shot speaker encoding.

mod adapt;
mod train;

use std::path::Path;

use crate::corpus::{resolve_wav, Condition, CorpusError, Manifest, Triple};
use crate::diffcore::{DiffError, Tensor};
use crate::model::{ModelError, SpeakerEncoder};
use crate::signal::{load_wav, AnalysisConfig, MelAnalyzer, MelSpectrogram, SignalError};

pub use adapt::{few_shot_adapt, one_shot_encode, select_donor_speaker, AdaptConfig, AdaptOutcome};
pub use train::{
    normalized, tf_item, total_loss, train_base, LossParts, StepLog, TrainConfig, TrainOutcome, TRAIN_LOG_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum CloningError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("adaptation recipe violated: {0}")]
    Recipe(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl From<DiffError> for CloningError {
    fn from(e: DiffError) -> Self {
        CloningError::Model(ModelError::Diff(e))
    }
}

/// One utterance ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub speaker_id: String,
    pub tokens: Vec<usize>,
    /// Raw log-mel frames, `T × n_mels`.
    pub mel: Tensor,
    pub condition: Condition,
    /// Speaker-encoder embedding of this utterance (encoding variant).
    pub xvec: Option<Vec<f64>>,
}

pub fn mel_tensor(mel: &MelSpectrogram) -> Tensor {
    Tensor::from_rows(&mel.frames).expect("mel frames are rectangular")
}

/// Compute log-mel features for every record of `manifest`.
pub fn load_examples(manifest: &Manifest, dir: &Path, analysis: &AnalysisConfig) -> Result<Vec<Example>, CloningError> {
    let an = MelAnalyzer::new(analysis)?;
    manifest
        .iter()
        .map(|u| {
            let w = load_wav(&resolve_wav(dir, &u.wav_path))?;
            Ok(Example {
                utt_id: u.utt_id.clone(),
                speaker_id: u.speaker_id.clone(),
                tokens: u.tokens.clone(),
                mel: mel_tensor(&an.analyze(&w)?),
                condition: u.condition,
                xvec: None,
            })
        })
        .collect()
}

/// Fill `xvec` of every example from `enc`.
pub fn attach_xvectors(examples: &mut [Example], enc: &SpeakerEncoder) -> Result<(), CloningError> {
    for e in examples {
        e.xvec = Some(enc.embed(&e.mel)?);
    }
    Ok(())
}

/// Encoding-variant training items: the target's text and frames with the
/// reference's speaker vector, labelled by the reference condition.
pub fn triple_examples(triples: &[Triple], examples: &[Example]) -> Result<Vec<Example>, CloningError> {
    let find = |id: &str| {
        examples
            .iter()
            .find(|e| e.utt_id == id)
            .ok_or_else(|| CloningError::Data(format!("triple refers to unknown utterance {id}")))
    };
    triples
        .iter()
        .map(|t| {
            let (r, g) = (find(&t.ref_utt)?, find(&t.tgt_utt)?);
            if r.speaker_id != g.speaker_id {
                return Err(CloningError::Data(format!("triple {} mixes speakers", t.triple_id)));
            }
            Ok(Example {
                utt_id: t.triple_id.clone(),
                condition: t.label,
                xvec: Some(
                    r.xvec
                        .clone()
                        .ok_or_else(|| CloningError::Data(format!("{} has no speaker vector", r.utt_id)))?,
                ),
                ..g.clone()
            })
        })
        .collect()
}

/// Per-band mean and standard deviation over all frames.
pub fn band_stats(examples: &[Example]) -> Result<(Vec<f64>, Vec<f64>), CloningError> {
    let first = examples
        .first()
        .ok_or_else(|| CloningError::Data("no examples for feature statistics".into()))?;
    let d = first.mel.cols();
    let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
    for e in examples {
        for t in 0..e.mel.rows() {
            for (j, v) in e.mel.row(t).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
        .collect();
    Ok((mean, std))
}

/// Sorted speaker ids; the position is the speaker-table row.
pub fn speaker_index(examples: &[Example]) -> Vec<String> {
    let mut ids: Vec<String> = examples.iter().map(|e| e.speaker_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}
