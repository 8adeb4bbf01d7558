use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{MelAnalyzer, MelSpectrogram};
use super::wav::Waveform;
use super::SignalError;

/// Non-negative linear power spectrum whose filterbank energies approximate
/// `energies`. Starts from spreading each band back over its filter and refines
/// with multiplicative (Richardson-Lucy) updates.
pub fn mel_to_linear_power(analyzer: &MelAnalyzer, energies: &[f64]) -> Vec<f64> {
    const REFINE_ITERS: usize = 100;
    let filters = analyzer.filters();
    let nb = analyzer.config().n_bins();
    let mut out = vec![0.0; nb];
    let mut weight = vec![0.0; nb];
    for (f, &e) in filters.iter().zip(energies) {
        let area: f64 = f.iter().sum();
        if area <= 0.0 {
            continue;
        }
        for k in 0..nb {
            out[k] += f[k] * e / area;
            weight[k] += f[k];
        }
    }
    for (o, w) in out.iter_mut().zip(&weight) {
        if *w > 0.0 {
            *o /= w;
        }
    }
    for _ in 0..REFINE_ITERS {
        let approx = analyzer.band_energies(&out);
        let mut num = vec![0.0; nb];
        for ((f, &e), &a) in filters.iter().zip(energies).zip(&approx) {
            if a <= 0.0 {
                continue;
            }
            let ratio = e / a;
            for k in 0..nb {
                num[k] += f[k] * ratio;
            }
        }
        for k in 0..nb {
            if weight[k] > 0.0 {
                out[k] *= num[k] / weight[k];
            }
        }
    }
    out
}

/// Phase reconstruction from a log-mel spectrogram.
pub fn griffin_lim(
    mel: &MelSpectrogram,
    analyzer: &MelAnalyzer,
    n_iters: usize,
    seed: u64,
) -> Result<Waveform, SignalError> {
    if n_iters == 0 {
        return Err(SignalError::Config("griffin_lim needs n_iters >= 1".into()));
    }
    let cfg = analyzer.config();
    if mel.n_mels != cfg.n_mels {
        return Err(SignalError::Config(format!(
            "mel has {} bands, analyzer expects {}",
            mel.n_mels, cfg.n_mels
        )));
    }
    let mags: Vec<Vec<f64>> = mel
        .frames
        .iter()
        .map(|f| {
            let e: Vec<f64> = f.iter().map(|v| v.exp()).collect();
            mel_to_linear_power(analyzer, &e).into_iter().map(f64::sqrt).collect()
        })
        .collect();
    let stft = analyzer.stft();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra: Vec<Vec<Complex<f64>>> = mags
        .iter()
        .map(|m| {
            m.iter()
                .map(|&a| Complex::from_polar(a, rng.gen_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let mut signal = stft.synthesize(&spectra);
    for _ in 1..n_iters {
        let est = stft.analyze(&signal);
        for (spec, (m, e)) in spectra.iter_mut().zip(mags.iter().zip(&est)) {
            for (s, (a, c)) in spec.iter_mut().zip(m.iter().zip(e)) {
                let n = c.norm();
                *s = if n > 1e-12 { c * (a / n) } else { Complex::new(*a, 0.0) };
            }
        }
        signal = stft.synthesize(&spectra);
    }
    for s in &mut signal {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(signal, cfg.sample_rate)
}
