//! Seeded background-noise generators standing in for a recorded noise corpus.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::signal::Waveform;

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Bandpass,
    Modulated,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Bandpass,
        NoiseKind::Modulated,
    ];
}

#[derive(Debug, Clone)]
pub struct NoiseClip {
    pub name: String,
    pub kind: NoiseKind,
    pub waveform: Waveform,
}

/// Generate one clip of `len` samples.
pub fn generate_noise(kind: NoiseKind, len: usize, sample_rate: u32, seed_value: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, "noise");
    let sr = sample_rate as f64;
    let mut white = || -> f64 { StandardNormal.sample(&mut rng) };
    match kind {
        NoiseKind::White => (0..len).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's refined filter.
            let mut b = [0.0f64; 7];
            (0..len)
                .map(|_| {
                    let w = white();
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
                    b[6] = w * 0.115926;
                    y
                })
                .collect()
        }
        NoiseKind::Bandpass | NoiseKind::Modulated => {
            let (fc, bw) = if kind == NoiseKind::Bandpass {
                (rng_center(seed_value, 600.0, 3000.0), 700.0)
            } else {
                (rng_center(seed_value, 300.0, 1500.0), 1500.0)
            };
            let r = (-PI * bw / sr).exp();
            let a1 = 2.0 * r * (2.0 * PI * fc / sr).cos();
            let a2 = -r * r;
            let (mut y1, mut y2) = (0.0, 0.0);
            let rate = rng_center(seed_value ^ 0x5a5a, 2.0, 6.0);
            (0..len)
                .map(|i| {
                    let y = (1.0 - r) * white() + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    if kind == NoiseKind::Modulated {
                        let t = i as f64 / sr;
                        y * (0.6 + 0.4 * (2.0 * PI * rate * t).sin())
                    } else {
                        y
                    }
                })
                .collect()
        }
    }
}

fn rng_center(seed_value: u64, lo: f64, hi: f64) -> f64 {
    seed::rng(seed_value, "noise-centre").gen_range(lo..hi)
}

/// A fixed set of clips, `per_kind` of each family, each `seconds` long.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub clips: Vec<NoiseClip>,
}

impl NoiseBank {
    pub fn generate(per_kind: usize, seconds: f64, sample_rate: u32, seed_value: u64) -> Result<Self, CorpusError> {
        if per_kind == 0 || seconds <= 0.0 {
            return Err(CorpusError::Invalid(
                "noise bank needs at least one non-empty clip".into(),
            ));
        }
        let len = (seconds * sample_rate as f64) as usize;
        let mut clips = Vec::new();
        for kind in NoiseKind::ALL {
            for j in 0..per_kind {
                let name = format!("{kind:?}-{j}").to_lowercase();
                let s = seed::derive(seed_value, &name);
                let mut samples = generate_noise(kind, len, sample_rate, s);
                let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
                clips.push(NoiseClip {
                    name,
                    kind,
                    waveform: Waveform::new(samples, sample_rate).map_err(CorpusError::from)?,
                });
            }
        }
        Ok(Self { clips })
    }

    /// Bank used by both augmentation pipelines.
    pub fn standard(sample_rate: u32, seed_value: u64) -> Result<Self, CorpusError> {
        Self::generate(2, 2.0, sample_rate, seed_value)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{AnalysisConfig, MelAnalyzer};

    #[test]
    fn families_have_distinct_spectra() {
        let cfg = AnalysisConfig::toy();
        let an = MelAnalyzer::new(&cfg).unwrap();
        let tilt = |kind| {
            let w = Waveform::new(generate_noise(kind, 16000, 16000, 3), 16000).unwrap();
            let mel = an.analyze(&w).unwrap();
            let n = mel.num_frames() as f64;
            let band = |b: usize| mel.frames.iter().map(|f| f[b]).sum::<f64>() / n;
            band(2) - band(29)
        };
        let (w, p) = (tilt(NoiseKind::White), tilt(NoiseKind::Pink));
        // White noise is flat per Hz, so mel bands (wider at the top) gain energy;
        // pink noise tilts the other way.
        assert!(w < 0.0 && p > w + 1.0, "white {w}, pink {p}");
    }

    #[test]
    fn bank_is_deterministic() {
        let a = NoiseBank::standard(16000, 1).unwrap();
        let b = NoiseBank::standard(16000, 1).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.waveform, y.waveform);
        }
        assert!(NoiseBank::generate(0, 1.0, 16000, 1).is_err());
    }
}
