use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;

#[derive(Parser, Debug)]
#[command(name = "datclone", version, about = "Noise-robust voice cloning on a toy corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML); built-in defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept checkpoints whose architecture hash differs from the config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate or augment a toy corpus.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Train the base acoustic model or the speaker encoder.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Clone a new speaker by fine-tuning.
    Adapt {
        #[command(subcommand)]
        cmd: AdaptCmd,
    },
    /// Clone a new speaker from an embedding.
    Encode {
        #[command(subcommand)]
        cmd: EncodeCmd,
    },
    /// Synthesize a token sequence to mel frames and audio.
    Synth(SynthArgs),
    /// Measure synthesis quality or noise leakage.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Export data for plotting.
    Export {
        #[command(subcommand)]
        cmd: ExportCmd,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    Gen(GenArgs),
    Augment(AugmentArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// p1/p2 partition with noisy copies for the adaptation variant.
    Adaptation,
    /// Clean and noisy-reference triples for the encoding variant.
    Encoding,
    /// Hold speakers out and build their test sets and adaptation pool.
    HeldOut,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Clean source manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "adaptation")]
    pub mode: AugmentMode,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    Base(TrainBaseArgs),
    /// Pretrain the speaker encoder on clean utterances.
    Encoder(TrainEncoderArgs),
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Speaker encoder checkpoint (encoding variant).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
enum AdaptCmd {
    FewShot(AdaptArgs),
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    /// Base checkpoint (adaptation variant).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Transcribed utterances of the target speaker.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Target speaker id; defaults to the only speaker in the manifest.
    #[arg(long)]
    pub speaker: Option<String>,
    /// Use at most this many utterances.
    #[arg(long, default_value_t = 8)]
    pub utts: usize,
    /// Training speaker whose table row seeds the new one.
    #[arg(long, conflicts_with = "donor_manifest")]
    pub donor: Option<String>,
    /// Pick the donor by embedding similarity against these utterances.
    #[arg(long, requires = "encoder")]
    pub donor_manifest: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
enum EncodeCmd {
    OneShot(EncodeArgs),
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub speaker: Option<String>,
    /// Number of reference utterances.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Checkpoint to fingerprint; it is only read.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Clean,
    Noisy,
}

/// Who to synthesize: a table speaker or an embedding file.
#[derive(Args, Debug, Clone)]
pub struct SpeakerArgs {
    #[arg(long)]
    pub speaker: Option<String>,
    /// JSON written by `encode one-shot`.
    #[arg(long, conflicts_with = "speaker")]
    pub embedding: Option<PathBuf>,
    /// Noise tag (adaptation variant).
    #[arg(long, value_enum, default_value = "clean")]
    pub tag: Tag,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Space-separated token ids.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub tokens: Option<String>,
    /// Synthesize every transcript of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub speaker: SpeakerArgs,
    /// Output WAV file, or directory when `--manifest` is given.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Mel-cepstral distortion against reference utterances.
    Mcd(EvalArgs),
    /// Speaker-embedding cosine similarity against reference utterances.
    Cosine(EvalArgs),
    /// Noise probe on frozen latent frames.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference utterances.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[command(flatten)]
    pub speaker: SpeakerArgs,
    /// Row name; defaults to the manifest file stem.
    #[arg(long)]
    pub set: Option<String>,
    /// Model name; defaults to `dir/stem` of the checkpoint.
    #[arg(long)]
    pub model_name: Option<String>,
    /// Report directory; rows are merged into an existing report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeFeatures {
    Latent,
    Mel,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Balanced clean/noisy utterances.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Needed for encoding-variant checkpoints.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "latent")]
    pub features: ProbeFeatures,
    #[arg(long)]
    pub set: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
enum ExportCmd {
    Embeddings(ExportArgs),
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    /// Encoding-variant model; export its projected speaker vectors instead
    /// of raw encoder embeddings.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Corpus { cmd: CorpusCmd::Gen(a) } => commands::corpus_gen(&a),
        Cmd::Corpus {
            cmd: CorpusCmd::Augment(a),
        } => commands::corpus_augment(&a),
        Cmd::Train { cmd: TrainCmd::Base(a) } => commands::train_base(&a),
        Cmd::Train {
            cmd: TrainCmd::Encoder(a),
        } => commands::train_encoder(&a),
        Cmd::Adapt {
            cmd: AdaptCmd::FewShot(a),
        } => commands::adapt_few_shot(&a),
        Cmd::Encode {
            cmd: EncodeCmd::OneShot(a),
        } => commands::encode_one_shot(&a),
        Cmd::Synth(a) => commands::synth(&a),
        Cmd::Eval { cmd: EvalCmd::Mcd(a) } => commands::eval_synthesis(&a, commands::Metric::Mcd),
        Cmd::Eval {
            cmd: EvalCmd::Cosine(a),
        } => commands::eval_synthesis(&a, commands::Metric::Cosine),
        Cmd::Eval { cmd: EvalCmd::Probe(a) } => commands::eval_probe(&a),
        Cmd::Export {
            cmd: ExportCmd::Embeddings(a),
        } => commands::export_embeddings(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("datclone: {e}");
            ExitCode::from(e.code)
        }
    }
}
