//! Run configuration read from `--config` (TOML). Every section is optional.

use std::fs;
use std::path::Path;

use datclone::cloning::{AdaptConfig, TrainConfig};
use datclone::corpus::{SnrRange, ToyCorpusConfig};
use datclone::eval::ProbeConfig;
use datclone::model::{ModelConfig, TdnnConfig, TdnnTrainConfig};
use datclone::signal::AnalysisConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub split_fraction: f64,
    pub snr: SnrRange,
    pub held_out: usize,
    pub n_test: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            split_fraction: 0.5,
            snr: SnrRange::default(),
            held_out: 2,
            n_test: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub max_frames: usize,
    pub griffin_lim_iters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_frames: 400,
            griffin_lim_iters: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: ToyCorpusConfig,
    pub augment: AugmentConfig,
    pub analysis: AnalysisConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub speaker_encoder: TdnnConfig,
    pub speaker_encoder_train: TdnnTrainConfig,
    pub adapt: AdaptConfig,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.corpus.seed = s;
            cfg.train.seed = s;
            cfg.adapt.seed = s;
            cfg.probe.seed = s;
            cfg.speaker_encoder_train.seed = s;
        }
        // The model always follows the training variant and the analysis width.
        cfg.model.variant = cfg.train.variant;
        cfg.model.n_mels = cfg.analysis.n_mels;
        cfg.speaker_encoder.n_mels = cfg.analysis.n_mels;
        Ok(cfg)
    }

    /// Seed recorded in reports.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.toml");
        fs::write(&p, "[bogus]\nx = 1\n").unwrap();
        assert_eq!(RunConfig::load(Some(&p), None).unwrap_err().code, 2);
    }

    #[test]
    fn seed_flag_overrides_every_stage() {
        let cfg = RunConfig::load(None, Some(9)).unwrap();
        assert_eq!(
            [
                cfg.corpus.seed,
                cfg.train.seed,
                cfg.adapt.seed,
                cfg.probe.seed,
                cfg.speaker_encoder_train.seed
            ],
            [9; 5]
        );
    }
}
