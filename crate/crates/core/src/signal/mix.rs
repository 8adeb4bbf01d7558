use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wav::{power, Waveform};
use super::SignalError;

/// Mixtures whose peak would exceed this are rescaled, never clipped.
pub const PEAK_LIMIT: f64 = 0.99;

/// Result of [`mix_at_snr`]. `waveform = gain · (clean + scaled_noise)`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub waveform: Waveform,
    pub scaled_noise: Vec<f64>,
    pub info: MixInfo,
}

/// Everything needed to reproduce or re-measure a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixInfo {
    pub snr_db: f64,
    pub noise_scale: f64,
    pub gain: f64,
    pub offset: usize,
}

/// Noise samples aligned to `len`, starting at `offset` and wrapping around.
pub fn noise_segment(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Add `noise` to `clean` so that the clean-to-noise power ratio is `snr_db`.
///
/// The noise start offset is drawn from `seed`; the noise is tiled when shorter
/// than the clean signal. Powers are measured over the full overlap.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Mixture, SignalError> {
    if clean.sample_rate != noise.sample_rate {
        return Err(SignalError::Config(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(SignalError::Config("snr_db must be finite".into()));
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(SignalError::ZeroPower("clean signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clean.len();
    let offset = if noise.len() > n {
        rng.gen_range(0..=noise.len() - n)
    } else {
        rng.gen_range(0..noise.len())
    };
    let segment = noise_segment(&noise.samples, n, offset);
    let p_noise = power(&segment);
    if p_noise <= 0.0 {
        return Err(SignalError::ZeroPower("noise segment"));
    }
    let noise_scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f64> = segment.iter().map(|v| v * noise_scale).collect();
    let mut mixed: Vec<f64> = clean.samples.iter().zip(&scaled_noise).map(|(c, v)| c + v).collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    if gain != 1.0 {
        mixed.iter_mut().for_each(|v| *v *= gain);
    }
    Ok(Mixture {
        waveform: Waveform::new(mixed, clean.sample_rate)?,
        scaled_noise,
        info: MixInfo {
            snr_db,
            noise_scale,
            gain,
            offset,
        },
    })
}

/// `10·log10(P_clean / P_noise)`.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

/// SNR of a stored mixture, recovering the noise as `mixed / gain − clean`.
pub fn measure_mixture_snr(clean: &[f64], mixed: &[f64], gain: f64) -> f64 {
    let noise: Vec<f64> = mixed.iter().zip(clean).map(|(m, c)| m / gain - c).collect();
    snr_db(clean, &noise)
}
