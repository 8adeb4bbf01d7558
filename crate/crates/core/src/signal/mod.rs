//! Audio I/O, log-mel analysis, noise mixing, Griffin-Lim resynthesis and the
//! objective metrics (DTW-aligned MCD, cosine similarity).

mod dtw;
mod griffin_lim;
mod mel;
mod metrics;
mod mix;
mod wav;

pub use dtw::{dtw, euclidean, AlignmentPath};
pub use griffin_lim::{griffin_lim, mel_to_linear_power};
pub use mel::{
    hann, hz_to_mel, mel_band_centers, mel_filterbank, mel_spectrogram, mel_to_hz, AnalysisConfig, MelAnalyzer,
    MelCepstra, MelSpectrogram, Stft,
};
pub use metrics::{cosine_similarity, mcd, McdResult, MCD_SCALE};
pub use mix::{measure_mixture_snr, mix_at_snr, noise_segment, snr_db, MixInfo, Mixture, PEAK_LIMIT};
pub use wav::{load_wav, save_wav, Waveform, DEFAULT_SAMPLE_RATE};

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("empty audio")]
    EmptyAudio,
    #[error("mono required, file has {0} channels")]
    MonoRequired(u16),
    #[error("malformed audio: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("too short: {0}")]
    TooShort(String),
    #[error("invalid analysis configuration: {0}")]
    Config(String),
    #[error("zero-power {0}: SNR undefined")]
    ZeroPower(&'static str),
    #[error("cepstral order mismatch: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
}
