//! Toy speech corpus, manifests and the two noise-augmentation pipelines.

mod augment;
mod manifest;
mod noise;
mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::signal::{save_wav, SignalError, Waveform, DEFAULT_SAMPLE_RATE};

pub use augment::{
    augment_adaptation, augment_encoding, make_test_sets, read_mixes, split_held_out, AdaptationSplits, CorpusSplit,
    EncodingSet, MixRecord, SnrRange, TestSet, TestSets, Triple, MIXES_FILE,
};
pub use manifest::{resolve_wav, Condition, Manifest, Utterance};
pub use noise::{generate_noise, NoiseBank, NoiseClip, NoiseKind};
pub use toy::{
    sample_profiles, token_inventory, Gender, TokenShape, ToyRenderer, ToySpeakerProfile, MIN_SPEAKER_SEPARATION,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus request: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("empty partition: {0}")]
    EmptyPartition(String),
    #[error("held-out speakers overlap training data: {0}")]
    Overlap(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io(format!("{}: {e}", path.display()))
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPEAKERS_FILE: &str = "speakers.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            utts_per_speaker: 20,
            vocab_size: 10,
            min_tokens: 3,
            max_tokens: 6,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Invalid(m));
        if self.n_speakers < 4 {
            return bad(format!("n_speakers must be >= 4, got {}", self.n_speakers));
        }
        if self.vocab_size < 8 {
            return bad(format!("vocab_size must be >= 8, got {}", self.vocab_size));
        }
        if self.utts_per_speaker == 0 {
            return bad("utts_per_speaker must be >= 1".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("bad token range {}..={}", self.min_tokens, self.max_tokens));
        }
        Ok(())
    }
}

/// Sidecar describing how the corpus was rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config: ToyCorpusConfig,
    pub profiles: Vec<ToySpeakerProfile>,
    pub tokens: Vec<TokenShape>,
}

impl CorpusInfo {
    pub fn profile(&self, speaker_id: &str) -> Option<&ToySpeakerProfile> {
        self.profiles.iter().find(|p| p.speaker_id == speaker_id)
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join(SPEAKERS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub info: CorpusInfo,
}

impl ToyCorpus {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn open(dir: &Path) -> Result<Self, CorpusError> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(&dir.join(MANIFEST_FILE))?,
            info: CorpusInfo::read(dir)?,
        })
    }
}

/// Render the clean corpus into `out_dir`: `wavs/*.wav`, `manifest.tsv` and
/// `speakers.json`.
pub fn generate_toy_corpus(cfg: &ToyCorpusConfig, out_dir: &Path) -> Result<ToyCorpus, CorpusError> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| io_err(&wav_dir, e))?;
    let profiles = sample_profiles(cfg.n_speakers, cfg.seed);
    let renderer = ToyRenderer::new(cfg.vocab_size, cfg.sample_rate, cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for p in &profiles {
        for j in 0..cfg.utts_per_speaker {
            let utt_id = format!("{}_u{j:03}", p.speaker_id);
            let mut rng = seed::rng(cfg.seed, &format!("text/{utt_id}"));
            let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let samples = renderer.render(p, &tokens, seed::derive(cfg.seed, &utt_id))?;
            let rel = PathBuf::from("wavs").join(format!("{utt_id}.wav"));
            save_wav(&out_dir.join(&rel), &Waveform::new(samples, cfg.sample_rate)?)?;
            records.push(Utterance {
                utt_id,
                speaker_id: p.speaker_id.clone(),
                tokens,
                wav_path: rel,
                condition: Condition::Clean,
                snr_db: None,
                parent_utt: None,
            });
        }
    }
    let manifest = Manifest::new(records)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let info = CorpusInfo {
        config: cfg.clone(),
        profiles,
        tokens: renderer.tokens,
    };
    let path = out_dir.join(SPEAKERS_FILE);
    let json = serde_json::to_string_pretty(&info).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(ToyCorpus {
        dir: out_dir.to_path_buf(),
        manifest,
        info,
    })
}
