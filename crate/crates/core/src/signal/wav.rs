use std::path::Path;

use super::SignalError;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::EmptyAudio);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SignalError::Format("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Samples as they will read back from a 16-bit file.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| quantize(s) as f64 / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Read a RIFF PCM 16-bit mono file.
pub fn load_wav(path: &Path) -> Result<Waveform, SignalError> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => SignalError::Io(format!("{}: {io}", path.display())),
        other => SignalError::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(SignalError::MonoRequired(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(SignalError::Format(format!(
            "{}: expected 16-bit PCM, got {} bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| SignalError::Format(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(SignalError::EmptyAudio);
    }
    Waveform::new(samples, spec.sample_rate)
}

pub fn save_wav(path: &Path, w: &Waveform) -> Result<(), SignalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| SignalError::Io(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(io)?;
    }
    writer.finalize().map_err(io)
}
