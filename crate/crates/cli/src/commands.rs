//! Subcommand bodies. Each loads the run configuration, checks its inputs and
//! writes its outputs; nothing is printed to stdout except a short summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use datclone::cloning::{
    attach_xvectors, few_shot_adapt, load_examples, one_shot_encode, select_donor_speaker, speaker_index,
    train_base as run_train_base, triple_examples, Example,
};
use datclone::corpus::{
    augment_adaptation, augment_encoding, generate_toy_corpus, make_test_sets, split_held_out, Condition, EncodingSet,
    Manifest,
};
use datclone::diffcore::file_hash;
use datclone::eval::{
    evaluate_synthesis, export_embeddings as write_embeddings, latent_probe_data, mel_probe_data, probe_accuracy,
    EmbeddingRow, EvalReport, EvalRow, REPORT_JSONL,
};
use datclone::model::{
    load_model, load_speaker_encoder, save_model, save_speaker_encoder, AcousticModel, Dropout, SpeakerEncoder,
    SpeakerInput, Variant,
};
use datclone::seed;
use datclone::signal::{griffin_lim, save_wav, MelAnalyzer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{
    AdaptArgs, AugmentArgs, AugmentMode, Common, EncodeArgs, EvalArgs, ExportArgs, GenArgs, ProbeArgs, ProbeFeatures,
    SpeakerArgs, SynthArgs, Tag, TrainBaseArgs, TrainEncoderArgs,
};

/// What `encode one-shot` writes and `--embedding` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub speaker_id: String,
    pub utts: Vec<String>,
    pub vector: Vec<f64>,
    pub checkpoint_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mcd,
    Cosine,
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(c.config.as_deref(), c.seed)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "unnamed".into(), |s| s.to_string_lossy().into_owned())
}

/// `run/final.ckpt` is named `run/final`; checkpoints from different runs
/// usually share a file name.
fn model_name(p: &Path) -> String {
    match p.parent().and_then(Path::file_name) {
        Some(d) => format!("{}/{}", d.to_string_lossy(), stem(p)),
        None => stem(p),
    }
}

fn load_set(path: &Path, cfg: &RunConfig) -> Result<(Manifest, Vec<Example>), CliError> {
    let m = Manifest::read(path)?;
    if m.is_empty() {
        return Err(CliError::data(format!("{} is empty", path.display())));
    }
    let ex = load_examples(&m, &parent_dir(path), &cfg.analysis)?;
    Ok((m, ex))
}

fn hash(path: &Path) -> Result<String, CliError> {
    file_hash(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Architecture hashes are checked against the configuration only when one
/// was given explicitly.
fn open_model(path: &Path, cfg: &RunConfig, c: &Common) -> Result<(AcousticModel, Vec<String>), CliError> {
    let expected = c.config.is_some().then_some(&cfg.model);
    let (model, extra) = load_model(path, expected, c.force)?;
    let speakers = extra
        .get("speakers")
        .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
        .unwrap_or_default();
    if model.variant() == Variant::Adaptation && speakers.len() != model.n_speakers() {
        return Err(CliError::data(format!(
            "{}: {} speaker ids for {} table rows",
            path.display(),
            speakers.len(),
            model.n_speakers()
        )));
    }
    Ok((model, speakers))
}

fn require_encoder(p: Option<&PathBuf>, why: &str) -> Result<SpeakerEncoder, CliError> {
    let p = p.ok_or_else(|| CliError::config(format!("--encoder is required {why}")))?;
    Ok(load_speaker_encoder(p)?)
}

/// Encoding-variant items for a manifest: with a `triples.tsv` beside it the
/// triples are expanded, otherwise every utterance is its own reference.
fn encoding_items(path: &Path, mut ex: Vec<Example>, enc: &SpeakerEncoder) -> Result<Vec<Example>, CliError> {
    attach_xvectors(&mut ex, enc)?;
    let dir = parent_dir(path);
    if dir.join("triples.tsv").exists() {
        let set = EncodingSet::read(&dir)?;
        return Ok(triple_examples(&set.triples, &ex)?);
    }
    Ok(ex)
}

fn pick_speaker(ex: &[Example], flag: Option<&String>) -> Result<String, CliError> {
    if let Some(s) = flag {
        return Ok(s.clone());
    }
    match speaker_index(ex).as_slice() {
        [one] => Ok(one.clone()),
        many => Err(CliError::config(format!(
            "manifest has {} speakers; choose one with --speaker",
            many.len()
        ))),
    }
}

fn resolve_speaker(
    model: &AcousticModel,
    speakers: &[String],
    a: &SpeakerArgs,
) -> Result<(SpeakerInput, Option<Condition>), CliError> {
    let tag = match a.tag {
        Tag::Clean => Condition::Clean,
        Tag::Noisy => Condition::Noisy,
    };
    match model.variant() {
        Variant::Adaptation => {
            let id = a
                .speaker
                .as_ref()
                .ok_or_else(|| CliError::config("adaptation checkpoints need --speaker"))?;
            let row = speakers
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| CliError::data(format!("speaker {id} is not in the checkpoint")))?;
            Ok((SpeakerInput::Table(row), Some(tag)))
        }
        Variant::Encoding => {
            let p = a
                .embedding
                .as_ref()
                .ok_or_else(|| CliError::config("encoding checkpoints need --embedding"))?;
            Ok((SpeakerInput::Vector(read_embedding(p)?.vector), None))
        }
    }
}

fn read_embedding(p: &Path) -> Result<EmbeddingFile, CliError> {
    let text = fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<(), CliError> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    Ok(fs::write(p, text + "\n")?)
}

fn merge_report(dir: &Path, row: EvalRow) -> Result<EvalReport, CliError> {
    let mut report = if dir.join(REPORT_JSONL).exists() {
        EvalReport::read(dir)?
    } else {
        EvalReport::default()
    };
    report.upsert(row);
    report.write(dir)?;
    Ok(report)
}

pub fn corpus_gen(a: &GenArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let c = generate_toy_corpus(&cfg.corpus, &a.out)?;
    println!(
        "{} utterances, {} speakers -> {}",
        c.manifest.len(),
        c.manifest.speakers().len(),
        c.manifest_path().display()
    );
    Ok(())
}

pub fn corpus_augment(a: &AugmentArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let clean = Manifest::read(&a.manifest)?;
    let dir = parent_dir(&a.manifest);
    let aug = &cfg.augment;
    let seed_value = cfg.corpus.seed;
    fs::create_dir_all(&a.out)?;
    match a.mode {
        AugmentMode::Adaptation => {
            let s = augment_adaptation(&clean, &dir, aug.split_fraction, aug.snr, seed_value, &a.out)?;
            for split in s.splits() {
                println!("{}\t{}", split.name, split.manifest.len());
            }
        }
        AugmentMode::Encoding => {
            let s = augment_encoding(&clean, &dir, aug.snr, seed_value, &a.out)?;
            println!(
                "{} triples ({} clean, {} noisy)",
                s.triples.len(),
                s.count(Condition::Clean),
                s.count(Condition::Noisy)
            );
        }
        AugmentMode::HeldOut => {
            let (base, held) = split_held_out(&clean, aug.held_out)?;
            let t = make_test_sets(&clean, &dir, &held, &base, aug.n_test, aug.snr, seed_value, &a.out)?;
            base.relocated(&dir, &a.out)?.write(&a.out.join("base.tsv"))?;
            println!("base\t{}", base.len());
            for s in &t.sets {
                println!("test_{}\t{}", s.name, s.manifest.len());
            }
            println!("adapt\t{}", t.adapt.len());
        }
    }
    Ok(())
}

pub fn train_encoder(a: &TrainEncoderArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let (_, ex) = load_set(&a.manifest, &cfg)?;
    let clean: Vec<&Example> = ex.iter().filter(|e| e.condition == Condition::Clean).collect();
    let speakers = speaker_index(&clean.iter().map(|&e| e.clone()).collect::<Vec<_>>());
    if speakers.len() < 2 {
        return Err(CliError::data(
            "speaker encoder needs clean audio from at least two speakers",
        ));
    }
    let mut tcfg = cfg.speaker_encoder.clone();
    tcfg.n_speakers = speakers.len();
    let mut enc = SpeakerEncoder::new(tcfg, cfg.speaker_encoder_train.seed)?;
    let data: Vec<_> = clean
        .iter()
        .map(|e| {
            (
                e.mel.clone(),
                speakers.iter().position(|s| *s == e.speaker_id).expect("indexed"),
            )
        })
        .collect();
    let losses = enc.pretrain(&data, &cfg.speaker_encoder_train)?;
    save_speaker_encoder(&enc, &a.out)?;
    println!(
        "speaker encoder: {} utterances, final loss {:.4}, accuracy {:.3}",
        data.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        enc.accuracy(&data)?
    );
    Ok(())
}

pub fn train_base(a: &TrainBaseArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let (_, ex) = load_set(&a.manifest, &cfg)?;
    let mut mcfg = cfg.model.clone();
    let ex = match cfg.train.variant {
        Variant::Adaptation => {
            mcfg.n_speakers = speaker_index(&ex).len();
            ex
        }
        Variant::Encoding => {
            let enc = require_encoder(a.encoder.as_ref(), "for the encoding variant")?;
            mcfg.d_xvec = enc.config.d_emb;
            encoding_items(&a.manifest, ex, &enc)?
        }
    };
    let model = AcousticModel::new(mcfg, cfg.train.seed)?;
    fs::create_dir_all(&a.out)?;
    let out = run_train_base(model, &ex, &cfg.train, Some(&a.out))?;
    let last = out.log.last().expect("at least one step");
    println!(
        "{} steps: L {:.4} (rcon {:.4}, ce {:.4}, classifier accuracy {:.3}) -> {}",
        out.log.len(),
        last.loss,
        last.l_rcon,
        last.l_noise_ce,
        last.cls_accuracy,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

pub fn adapt_few_shot(a: &AdaptArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let (base, speakers) = open_model(&a.checkpoint, &cfg, &a.common)?;
    let (_, ex) = load_set(&a.manifest, &cfg)?;
    let target = pick_speaker(&ex, a.speaker.as_ref())?;
    if speakers.contains(&target) {
        return Err(CliError::data(format!(
            "{target} is already a speaker of the base model"
        )));
    }
    let targets: Vec<Example> = ex.into_iter().filter(|e| e.speaker_id == target).take(a.utts).collect();
    if targets.is_empty() {
        return Err(CliError::data(format!(
            "no utterances of {target} in {}",
            a.manifest.display()
        )));
    }
    let donor = match (&a.donor, &a.donor_manifest) {
        (Some(d), _) => d.clone(),
        (None, Some(dm)) => {
            let enc = require_encoder(a.encoder.as_ref(), "to choose a donor")?;
            let (_, dex) = load_set(dm, &cfg)?;
            let mut cands: BTreeMap<String, Vec<_>> = BTreeMap::new();
            for e in dex
                .iter()
                .filter(|e| e.condition == Condition::Clean && speakers.contains(&e.speaker_id))
            {
                cands.entry(e.speaker_id.clone()).or_default().push(e.mel.clone());
            }
            let tm: Vec<_> = targets.iter().map(|e| e.mel.clone()).collect();
            select_donor_speaker(&enc, &tm, &cands)?
        }
        (None, None) => return Err(CliError::config("give --donor, or --donor-manifest with --encoder")),
    };
    let row = speakers
        .iter()
        .position(|s| *s == donor)
        .ok_or_else(|| CliError::data(format!("donor {donor} is not in the checkpoint")))?;
    fs::create_dir_all(&a.out)?;
    let out = few_shot_adapt(&base, &targets, row, &cfg.adapt, Some(&a.out))?;
    let mut all = speakers.clone();
    all.push(target.clone());
    let extra = serde_json::json!({
        "speakers": all,
        "adapt": cfg.adapt,
        "base_checkpoint": hash(&a.checkpoint)?,
        "donor": donor,
        "utts": targets.iter().map(|e| e.utt_id.clone()).collect::<Vec<_>>(),
        "steps": out.steps,
        "converged": out.converged,
        "synthesis_tag": out.synthesis_tag,
        "recipe": out.recipe,
    });
    let path = a.out.join("adapted.ckpt");
    save_model(&out.model, &path, extra)?;
    println!(
        "{target}: {} utterances, donor {donor}, {} steps ({}) -> {}",
        targets.len(),
        out.steps,
        if out.converged { "plateau" } else { "step budget" },
        path.display()
    );
    Ok(())
}

pub fn encode_one_shot(a: &EncodeArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let enc = load_speaker_encoder(&a.encoder)?;
    let before = a.checkpoint.as_deref().map(hash).transpose()?;
    let (_, ex) = load_set(&a.manifest, &cfg)?;
    let target = pick_speaker(&ex, a.speaker.as_ref())?;
    let refs: Vec<&Example> = ex.iter().filter(|e| e.speaker_id == target).take(a.k).collect();
    if a.k == 0 || refs.len() < a.k {
        return Err(CliError::data(format!(
            "need {} utterances of {target}, found {}",
            a.k,
            refs.len()
        )));
    }
    let mels: Vec<_> = refs.iter().map(|e| e.mel.clone()).collect();
    let vector = one_shot_encode(&enc, &mels)?;
    let after = a.checkpoint.as_deref().map(hash).transpose()?;
    if before != after {
        return Err(CliError::data("checkpoint changed while encoding"));
    }
    write_json(
        &a.out,
        &EmbeddingFile {
            speaker_id: target,
            utts: refs.iter().map(|e| e.utt_id.clone()).collect(),
            vector,
            checkpoint_hash: after,
        },
    )?;
    println!("{} references -> {}", refs.len(), a.out.display());
    Ok(())
}

fn parse_tokens(s: &str) -> Result<Vec<usize>, CliError> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::config(format!("bad token {t:?}"))))
        .collect()
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let (model, speakers) = open_model(&a.checkpoint, &cfg, &a.common)?;
    let (speaker, tag) = resolve_speaker(&model, &speakers, &a.speaker)?;
    let jobs: Vec<(PathBuf, Vec<usize>)> = match (&a.tokens, &a.manifest) {
        (Some(t), _) => vec![(a.out.clone(), parse_tokens(t)?)],
        (None, Some(m)) => {
            fs::create_dir_all(&a.out)?;
            Manifest::read(m)?
                .iter()
                .map(|u| (a.out.join(format!("{}.wav", u.utt_id)), u.tokens.clone()))
                .collect()
        }
        (None, None) => return Err(CliError::config("give --tokens or --manifest")),
    };
    let analyzer = MelAnalyzer::new(&cfg.analysis)?;
    for (k, (path, tokens)) in jobs.iter().enumerate() {
        let s = seed::derive(cfg.seed(), &format!("synth/{k}"));
        let syn = model.synthesize(
            tokens,
            &speaker,
            tag,
            cfg.synth.max_frames,
            Dropout::Seeded(s),
            &cfg.analysis,
        )?;
        if syn.budget_exhausted {
            eprintln!(
                "datclone: warning: {} hit the {}-frame budget",
                path.display(),
                cfg.synth.max_frames
            );
        }
        let wav = griffin_lim(&syn.mel, &analyzer, cfg.synth.griffin_lim_iters, s)?;
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d)?;
        }
        save_wav(path, &wav)?;
        let mut mel = String::new();
        for f in &syn.mel.frames {
            let row: Vec<String> = f.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(mel, "{}", row.join("\t"));
        }
        fs::write(path.with_extension("mel.tsv"), mel)?;
        println!("{} frames -> {}", syn.mel.num_frames(), path.display());
    }
    Ok(())
}

pub fn eval_synthesis(a: &EvalArgs, metric: Metric) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let (model, speakers) = open_model(&a.checkpoint, &cfg, &a.common)?;
    let (speaker, tag) = resolve_speaker(&model, &speakers, &a.speaker)?;
    let (manifest, refs) = load_set(&a.manifest, &cfg)?;
    let enc = match metric {
        Metric::Cosine => Some(require_encoder(a.encoder.as_ref(), "for cosine similarity")?),
        Metric::Mcd => None,
    };
    let m = evaluate_synthesis(&model, &refs, &speaker, tag, enc.as_ref(), &cfg.analysis, cfg.seed())?;
    if m.budget_exhausted > 0 {
        eprintln!(
            "datclone: warning: {} of {} syntheses hit the frame budget",
            m.budget_exhausted,
            refs.len()
        );
    }
    let set = a.set.clone().unwrap_or_else(|| stem(&a.manifest));
    let name = a.model_name.clone().unwrap_or_else(|| model_name(&a.checkpoint));
    let mut row = EvalRow::from_metrics(&set, &name, &m, hash(&a.checkpoint)?, &manifest, cfg.seed());
    if metric == Metric::Mcd {
        row.cosine = None;
    }
    let report = merge_report(&a.out, row)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn eval_probe(a: &ProbeArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let before = hash(&a.checkpoint)?;
    let (model, speakers) = open_model(&a.checkpoint, &cfg, &a.common)?;
    let (manifest, ex) = load_set(&a.manifest, &cfg)?;
    let data = match a.features {
        ProbeFeatures::Mel => mel_probe_data(&ex),
        ProbeFeatures::Latent => {
            let items = match model.variant() {
                Variant::Adaptation => ex,
                Variant::Encoding => {
                    let enc = require_encoder(a.encoder.as_ref(), "for encoding-variant checkpoints")?;
                    encoding_items(&a.manifest, ex, &enc)?
                }
            };
            latent_probe_data(&model, &items, &speakers, cfg.seed())?
        }
    };
    let r = probe_accuracy(&data, &cfg.probe)?;
    if hash(&a.checkpoint)? != before {
        return Err(CliError::data("checkpoint changed while probing"));
    }
    let set = a.set.clone().unwrap_or_else(|| stem(&a.manifest));
    let suffix = if a.features == ProbeFeatures::Mel { "+mel" } else { "" };
    let name = a.model_name.clone().unwrap_or_else(|| model_name(&a.checkpoint)) + suffix;
    let row = EvalRow {
        set,
        model: name,
        n: manifest.len(),
        mcd: None,
        cosine: None,
        probe_accuracy: Some(r.accuracy),
        checkpoint_hash: before,
        manifest_hash: manifest.hash(),
        seed: cfg.seed(),
    };
    let report = merge_report(&a.out, row)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn export_embeddings(a: &ExportArgs) -> Result<(), CliError> {
    let cfg = config(&a.common)?;
    let enc = load_speaker_encoder(&a.encoder)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let (m, _) = open_model(p, &cfg, &a.common)?;
            if m.variant() != Variant::Encoding {
                return Err(CliError::config(
                    "embedding export needs an encoding-variant checkpoint",
                ));
            }
            Some(m)
        }
        None => None,
    };
    let (_, ex) = load_set(&a.manifest, &cfg)?;
    let rows = ex
        .iter()
        .map(|e| {
            let x = enc.embed(&e.mel)?;
            let vector = match &model {
                Some(m) => m.speaker_vector(&SpeakerInput::Vector(x))?,
                None => x,
            };
            Ok(EmbeddingRow {
                utt_id: e.utt_id.clone(),
                speaker_id: e.speaker_id.clone(),
                condition: e.condition,
                vector,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let pca = write_embeddings(&rows, &a.out)?;
    println!(
        "{} rows, PCA variances {:.4} / {:.4} -> {}",
        rows.len(),
        pca.variances[0],
        pca.variances.get(1).copied().unwrap_or(0.0),
        a.out.display()
    );
    Ok(())
}
