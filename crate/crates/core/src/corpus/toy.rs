//! Synthetic speech: every token is a short harmonic (voiced) or filtered-noise
//! (fricative) burst, coloured by the speaker's pitch and resonances.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn letter(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpeakerProfile {
    pub speaker_id: String,
    pub gender: Gender,
    pub resonances_hz: [f64; 3],
    pub pitch_hz: f64,
    pub duration_scale: f64,
}

impl ToySpeakerProfile {
    /// Relative difference in pitch or any resonance reaches `min_rel`.
    pub fn distinct_from(&self, other: &Self, min_rel: f64) -> bool {
        let rel = |a: f64, b: f64| (a - b).abs() / a.min(b);
        rel(self.pitch_hz, other.pitch_hz) >= min_rel
            || self
                .resonances_hz
                .iter()
                .zip(&other.resonances_hz)
                .any(|(&a, &b)| rel(a, b) >= min_rel)
    }
}

/// Minimum relative pitch/resonance separation between any two speakers.
pub const MIN_SPEAKER_SEPARATION: f64 = 0.10;

/// Draw `n` mutually distinct profiles. Genders alternate M, F, M, …
pub fn sample_profiles(n: usize, seed_value: u64) -> Vec<ToySpeakerProfile> {
    let mut rng = seed::rng(seed_value, "profiles");
    let mut out: Vec<ToySpeakerProfile> = Vec::with_capacity(n);
    while out.len() < n {
        let i = out.len();
        let gender = if i.is_multiple_of(2) { Gender::M } else { Gender::F };
        let (pitch, scale) = match gender {
            Gender::M => (rng.gen_range(90.0..150.0), 1.0),
            Gender::F => (rng.gen_range(170.0..260.0), 1.15),
        };
        let cand = ToySpeakerProfile {
            speaker_id: format!("spk{i:02}"),
            gender,
            resonances_hz: [
                scale * rng.gen_range(420.0..700.0),
                scale * rng.gen_range(1150.0..1800.0),
                scale * rng.gen_range(2200.0..3000.0),
            ],
            pitch_hz: pitch,
            duration_scale: rng.gen_range(0.85..1.2),
        };
        if out.iter().all(|p| cand.distinct_from(p, MIN_SPEAKER_SEPARATION)) {
            out.push(cand);
        }
    }
    out
}

/// Speaker-independent acoustic identity of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenShape {
    pub voiced: bool,
    /// Multipliers on the speaker's resonances (voiced) or the band centre as
    /// a multiple of the third resonance (fricatives, first entry only).
    pub resonance_factors: [f64; 3],
    pub duration_ms: f64,
    pub gain: f64,
}

/// One shape per token id. Every fourth token is a fricative.
pub fn token_inventory(vocab_size: usize, seed_value: u64) -> Vec<TokenShape> {
    let mut rng = seed::rng(seed_value, "tokens");
    (0..vocab_size)
        .map(|v| {
            let voiced = v % 4 != 3;
            TokenShape {
                voiced,
                resonance_factors: if voiced {
                    [
                        rng.gen_range(0.6..1.5),
                        rng.gen_range(0.65..1.45),
                        rng.gen_range(0.8..1.2),
                    ]
                } else {
                    [rng.gen_range(1.2..2.3), 1.0, 1.0]
                },
                duration_ms: rng.gen_range(55.0..95.0),
                gain: if voiced { 1.0 } else { rng.gen_range(0.25..0.45) },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRenderer {
    pub sample_rate: u32,
    pub tokens: Vec<TokenShape>,
    /// Peak level each rendered utterance is normalised to.
    pub peak: f64,
    /// Standard deviation of the always-on background dither.
    pub dither: f64,
}

impl ToyRenderer {
    pub fn new(vocab_size: usize, sample_rate: u32, seed_value: u64) -> Self {
        Self {
            sample_rate,
            tokens: token_inventory(vocab_size, seed_value),
            peak: 0.5,
            dither: 2e-4,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Render `tokens` for `speaker`; `seed_value` drives jitter and fricative noise.
    pub fn render(
        &self,
        speaker: &ToySpeakerProfile,
        tokens: &[usize],
        seed_value: u64,
    ) -> Result<Vec<f64>, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::Invalid("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.tokens.len()) {
            return Err(CorpusError::Invalid(format!(
                "token {t} outside vocabulary of {}",
                self.tokens.len()
            )));
        }
        let sr = self.sample_rate as f64;
        let mut rng = seed::rng(seed_value, "render");
        let lead = (0.03 * sr) as usize;
        let mut out = vec![0.0; lead];
        let mut phase = 0.0f64;
        for &t in tokens {
            let shape = &self.tokens[t];
            let jitter: f64 = rng.gen_range(0.9..1.1);
            let n = (shape.duration_ms * 1e-3 * speaker.duration_scale * jitter * sr) as usize;
            let ramp = ((0.008 * sr) as usize).min(n / 2).max(1);
            let env = |i: usize| {
                let e = if i < ramp {
                    i as f64 / ramp as f64
                } else if i + ramp > n {
                    (n - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                0.5 - 0.5 * (PI * e).cos()
            };
            if shape.voiced {
                let formants: Vec<f64> = speaker
                    .resonances_hz
                    .iter()
                    .zip(&shape.resonance_factors)
                    .map(|(r, f)| r * f)
                    .collect();
                let bandwidths = [90.0, 130.0, 180.0];
                let f0_base = speaker.pitch_hz * rng.gen_range(0.95..1.05);
                let n_harm = ((0.45 * sr) / (f0_base * 1.1)) as usize;
                let amps: Vec<f64> = (1..=n_harm)
                    .map(|h| {
                        let f = h as f64 * f0_base;
                        let res: f64 = formants
                            .iter()
                            .zip(&bandwidths)
                            .enumerate()
                            .map(|(k, (fr, bw))| {
                                let g = [1.0, 0.6, 0.35][k];
                                g / (1.0 + ((f - fr) / bw).powi(2))
                            })
                            .sum();
                        res / (h as f64).sqrt()
                    })
                    .collect();
                for i in 0..n {
                    let prog = i as f64 / n as f64;
                    let f0 = f0_base * (1.0 + 0.04 * (PI * prog).sin());
                    phase += 2.0 * PI * f0 / sr;
                    let s: f64 = amps
                        .iter()
                        .enumerate()
                        .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                        .sum();
                    out.push(shape.gain * env(i) * s);
                }
            } else {
                // Two-pole resonator on white noise.
                let fc = (speaker.resonances_hz[2] * shape.resonance_factors[0]).min(0.45 * sr);
                let bw = 900.0;
                let r = (-PI * bw / sr).exp();
                let a1 = 2.0 * r * (2.0 * PI * fc / sr).cos();
                let a2 = -r * r;
                let (mut y1, mut y2) = (0.0, 0.0);
                for i in 0..n {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let y = (1.0 - r) * x + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    out.push(shape.gain * env(i) * y);
                }
            }
        }
        out.extend(std::iter::repeat_n(0.0, lead));
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak <= 0.0 {
            return Err(CorpusError::Invalid("rendered silence".into()));
        }
        let k = self.peak / peak;
        for v in &mut out {
            let d: f64 = StandardNormal.sample(&mut rng);
            *v = *v * k + self.dither * d;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_pairwise_distinct() {
        let ps = sample_profiles(16, 5);
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                assert!(a.distinct_from(b, 0.10), "{} vs {}", a.speaker_id, b.speaker_id);
            }
        }
        assert_eq!(ps[0].gender, Gender::M);
        assert_eq!(ps[1].gender, Gender::F);
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let ps = sample_profiles(2, 1);
        let r = ToyRenderer::new(8, 16000, 1);
        let a = r.render(&ps[0], &[0, 3, 5], 9).unwrap();
        assert_eq!(a, r.render(&ps[0], &[0, 3, 5], 9).unwrap());
        assert_ne!(a, r.render(&ps[1], &[0, 3, 5], 9).unwrap());
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.52);
        assert!(r.render(&ps[0], &[8], 9).is_err());
        assert!(r.render(&ps[0], &[], 9).is_err());
    }
}
