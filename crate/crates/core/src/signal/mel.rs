//! Log-mel analysis and mel-cepstra.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::Waveform;
use super::SignalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub frame_shift: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub energy_floor: f64,
    /// Cepstral coefficients kept for MCD, excluding the 0th.
    pub cepstral_order: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl AnalysisConfig {
    pub fn toy() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 512,
            frame_shift: 128,
            n_fft: 512,
            n_mels: 32,
            fmin: 0.0,
            fmax: 8_000.0,
            energy_floor: 1e-10,
            cepstral_order: 13,
        }
    }

    pub fn full_size() -> Self {
        Self {
            n_mels: 80,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let fail = |m: &str| Err(SignalError::Config(m.to_string()));
        if self.frame_length == 0 || self.frame_shift == 0 {
            return fail("frame_length and frame_shift must be positive");
        }
        if self.n_fft < self.frame_length {
            return fail("n_fft must be >= frame_length");
        }
        if self.n_mels < 2 {
            return fail("n_mels must be at least 2");
        }
        if self.cepstral_order == 0 || self.cepstral_order >= self.n_mels {
            return fail("cepstral_order must be in 1..n_mels");
        }
        if !(self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return fail("need fmin < fmax <= sample_rate / 2");
        }
        if !(self.energy_floor > 0.0) {
            return fail("energy_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn log_floor(&self) -> f64 {
        self.energy_floor.ln()
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            1 + (len - self.frame_length) / self.frame_shift
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_band_centers(cfg: &AnalysisConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `n_mels × n_bins`.
pub fn mel_filterbank(cfg: &AnalysisConfig) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Shared FFT plans and window for one analysis configuration.
pub struct Stft {
    cfg: AnalysisConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &AnalysisConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann(cfg.frame_length),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Complex spectra (bins `0..=n_fft/2`) of every full frame.
    pub fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let cfg = &self.cfg;
        let m = cfg.num_frames(samples.len());
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        (0..m)
            .map(|t| {
                let start = t * cfg.frame_shift;
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for i in 0..cfg.frame_length {
                    buf[i] = Complex::new(samples[start + i] * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..cfg.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add resynthesis of one-sided spectra.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let cfg = &self.cfg;
        if spectra.is_empty() {
            return Vec::new();
        }
        let len = (spectra.len() - 1) * cfg.frame_shift + cfg.frame_length;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let nb = cfg.n_bins();
        for (t, spec) in spectra.iter().enumerate() {
            for k in 0..cfg.n_fft {
                buf[k] = if k < nb { spec[k] } else { spec[cfg.n_fft - k].conj() };
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.frame_shift;
            for i in 0..cfg.frame_length {
                let w = self.window[i];
                out[start + i] += buf[i].re / cfg.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// `M × n_mels` natural-log mel energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub frame_shift: usize,
    pub frame_length: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<Vec<f64>>, cfg: &AnalysisConfig) -> Result<Self, SignalError> {
        if frames.is_empty() {
            return Err(SignalError::TooShort("mel spectrogram needs at least one frame".into()));
        }
        if frames.iter().any(|f| f.len() != cfg.n_mels) {
            return Err(SignalError::Config(format!(
                "every frame must have {} bands",
                cfg.n_mels
            )));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SignalError::Format("non-finite mel value".into()));
        }
        Ok(Self {
            frames,
            frame_shift: cfg.frame_shift,
            frame_length: cfg.frame_length,
            n_mels: cfg.n_mels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames[start..end].to_vec(),
            ..self.clone()
        }
    }
}

pub struct MelAnalyzer {
    cfg: AnalysisConfig,
    stft: Stft,
    filters: Vec<Vec<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: &AnalysisConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stft: Stft::new(cfg),
            filters: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.cfg
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Filterbank energies (before floor and log) of a power spectrum.
    pub fn band_energies(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|f| f.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn analyze(&self, w: &Waveform) -> Result<MelSpectrogram, SignalError> {
        if w.len() < self.cfg.frame_length {
            return Err(SignalError::TooShort(format!(
                "audio of {} samples is shorter than one {}-sample frame",
                w.len(),
                self.cfg.frame_length
            )));
        }
        let floor = self.cfg.energy_floor;
        let frames = self
            .stft
            .analyze(&w.samples)
            .into_iter()
            .map(|spec| {
                let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
                self.band_energies(&power)
                    .into_iter()
                    .map(|e| e.max(floor).ln())
                    .collect()
            })
            .collect();
        MelSpectrogram::new(frames, &self.cfg)
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &AnalysisConfig) -> Result<MelSpectrogram, SignalError> {
    MelAnalyzer::new(cfg)?.analyze(w)
}

/// Cepstral coefficients `1..=order` of each log-mel frame (orthonormal DCT-II).
#[derive(Debug, Clone, PartialEq)]
pub struct MelCepstra {
    pub frames: Vec<Vec<f64>>,
    pub order: usize,
}

impl MelCepstra {
    pub fn from_mel(mel: &MelSpectrogram, order: usize) -> Result<Self, SignalError> {
        let n = mel.n_mels;
        if order == 0 || order >= n {
            return Err(SignalError::Config(format!("cepstral order {order} must be in 1..{n}")));
        }
        let basis: Vec<Vec<f64>> = (1..=order)
            .map(|k| {
                let scale = (2.0 / n as f64).sqrt();
                (0..n)
                    .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / n as f64).cos())
                    .collect()
            })
            .collect();
        let frames = mel
            .frames
            .iter()
            .map(|f| {
                basis
                    .iter()
                    .map(|b| b.iter().zip(f).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect();
        Ok(Self { frames, order })
    }

    pub fn from_frames(frames: Vec<Vec<f64>>) -> Result<Self, SignalError> {
        let order = frames.first().map_or(0, Vec::len);
        if frames.is_empty() || order == 0 || frames.iter().any(|f| f.len() != order) {
            return Err(SignalError::Config("cepstra need equal, non-empty frames".into()));
        }
        Ok(Self { frames, order })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = AnalysisConfig::toy();
        for len in [512usize, 513, 640, 641, 16000] {
            let w = Waveform::new(vec![0.1; len], 16000).unwrap();
            let mel = mel_spectrogram(&w, &cfg).unwrap();
            assert_eq!(mel.num_frames(), 1 + (len - 512) / 128);
        }
    }

    #[test]
    fn shorter_than_one_frame_is_error() {
        let w = Waveform::new(vec![0.1; 511], 16000).unwrap();
        assert!(matches!(
            mel_spectrogram(&w, &AnalysisConfig::toy()),
            Err(SignalError::TooShort(_))
        ));
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let cfg = AnalysisConfig::toy();
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert!(mel.frames.iter().flatten().all(|v| *v == cfg.energy_floor.ln()));
    }

    #[test]
    fn sine_peaks_in_nearest_band() {
        let cfg = AnalysisConfig::toy();
        // Centers recomputed from the mel formula alone.
        let m_lo = 0.0;
        let m_hi = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=32)
            .map(|i| {
                let m = m_lo + (m_hi - m_lo) * i as f64 / 33.0;
                700.0 * (10f64.powf(m / 2595.0) - 1.0)
            })
            .collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let mel = mel_spectrogram(&tone(1000.0, 0.5, 8000), &cfg).unwrap();
        for f in &mel.frames {
            let arg = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let cfg = AnalysisConfig::toy();
        let a = mel_spectrogram(&tone(700.0, 0.2, 4000), &cfg).unwrap();
        let b = mel_spectrogram(&tone(700.0, 0.4, 4000), &cfg).unwrap();
        let floor = cfg.energy_floor.ln();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.iter().zip(fb) {
                if *x > floor {
                    assert!((y - x - 4f64.ln()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stft_resynthesis_is_near_perfect() {
        let cfg = AnalysisConfig::toy();
        let stft = Stft::new(&cfg);
        let w = tone(440.0, 0.5, 4096);
        let out = stft.synthesize(&stft.analyze(&w.samples));
        // Interior samples, where windows fully overlap.
        for (o, s) in out[512..3500].iter().zip(&w.samples[512..3500]) {
            assert!((o - s).abs() < 1e-9);
        }
    }

    #[test]
    fn cepstra_exclude_c0() {
        let cfg = AnalysisConfig::toy();
        let flat = MelSpectrogram::new(vec![vec![3.0; 32]; 2], &cfg).unwrap();
        let c = MelCepstra::from_mel(&flat, 13).unwrap();
        assert_eq!(c.order, 13);
        assert!(c.frames.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(MelCepstra::from_mel(&flat, 32).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AnalysisConfig::toy();
        cfg.n_fft = 256;
        assert!(cfg.validate().is_err());
        assert!(AnalysisConfig::full_size().validate().is_ok());
    }
}
