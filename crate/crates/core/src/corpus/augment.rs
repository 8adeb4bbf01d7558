use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::signal::{load_wav, mix_at_snr, save_wav, MixInfo};

use super::manifest::{resolve_wav, Condition, Manifest, Utterance};
use super::noise::{NoiseBank, NoiseKind};
use super::toy::Gender;
use super::{io_err, CorpusError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SnrRange {
    fn default() -> Self {
        Self { lo: 5.0, hi: 25.0 }
    }
}

impl SnrRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self, CorpusError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(CorpusError::Invalid(format!("bad SNR range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }
}

/// How one noisy copy was made; one JSON object per line in `mixes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub utt_id: String,
    pub parent_utt: String,
    pub noise_clip: String,
    pub noise_kind: NoiseKind,
    #[serde(flatten)]
    pub mix: MixInfo,
}

pub const MIXES_FILE: &str = "mixes.jsonl";

fn write_mixes(path: &Path, mixes: &[MixRecord]) -> Result<(), CorpusError> {
    let mut s = String::new();
    for m in mixes {
        s.push_str(&serde_json::to_string(m).map_err(|e| io_err(path, e))?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_mixes(path: &Path) -> Result<Vec<MixRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: String,
    pub manifest: Manifest,
}

/// Shared machinery: reads clean audio, writes noisy copies under `out/wavs`.
struct Augmenter {
    src_dir: PathBuf,
    out_dir: PathBuf,
    bank: NoiseBank,
    snr: SnrRange,
    seed: u64,
}

impl Augmenter {
    fn new(
        src: &Manifest,
        src_dir: &Path,
        out_dir: &Path,
        snr: SnrRange,
        seed_value: u64,
    ) -> Result<Self, CorpusError> {
        let first = src
            .records
            .first()
            .ok_or_else(|| CorpusError::EmptyPartition("source manifest is empty".into()))?;
        let sr = load_wav(&resolve_wav(src_dir, &first.wav_path))?.sample_rate;
        let wavs = out_dir.join("wavs");
        fs::create_dir_all(&wavs).map_err(|e| io_err(&wavs, e))?;
        let canon = |p: &Path| p.canonicalize().map_err(|e| io_err(p, e));
        Ok(Self {
            src_dir: canon(src_dir)?,
            out_dir: canon(out_dir)?,
            bank: NoiseBank::standard(sr, seed::derive(seed_value, "bank"))?,
            snr,
            seed: seed_value,
        })
    }

    /// Clean record with its path rewritten relative to the output directory.
    fn relocate(&self, u: &Utterance) -> Utterance {
        let abs = resolve_wav(&self.src_dir, &u.wav_path);
        let wav_path = pathdiff::diff_paths(&abs, &self.out_dir).unwrap_or(abs);
        Utterance { wav_path, ..u.clone() }
    }

    fn noisy_copy(&self, u: &Utterance) -> Result<(Utterance, MixRecord), CorpusError> {
        if u.condition != Condition::Clean {
            return Err(CorpusError::Manifest(format!("{} is not a clean utterance", u.utt_id)));
        }
        let mut rng = seed::rng(self.seed, &format!("mix/{}", u.utt_id));
        let clip = &self.bank.clips[rng.gen_range(0..self.bank.len())];
        // Quantised so the manifest's fixed 6-decimal field round-trips exactly.
        let snr = (rng.gen_range(self.snr.lo..=self.snr.hi) * 1e6).round() / 1e6;
        let clean = load_wav(&resolve_wav(&self.src_dir, &u.wav_path))?;
        let mixture = mix_at_snr(&clean, &clip.waveform, snr, rng.gen())?;
        let utt_id = format!("{}-n", u.utt_id);
        let rel = PathBuf::from("wavs").join(format!("{utt_id}.wav"));
        save_wav(&self.out_dir.join(&rel), &mixture.waveform)?;
        let noisy = Utterance {
            utt_id: utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            tokens: u.tokens.clone(),
            wav_path: rel,
            condition: Condition::Noisy,
            snr_db: Some(snr),
            parent_utt: Some(u.utt_id.clone()),
        };
        let rec = MixRecord {
            utt_id,
            parent_utt: u.utt_id.clone(),
            noise_clip: clip.name.clone(),
            noise_kind: clip.kind,
            mix: mixture.info,
        };
        Ok((noisy, rec))
    }

    fn noisy_copies(&self, m: &Manifest, mixes: &mut Vec<MixRecord>) -> Result<Manifest, CorpusError> {
        let mut out = Vec::with_capacity(m.len());
        for u in m.iter() {
            let (n, r) = self.noisy_copy(u)?;
            out.push(n);
            mixes.push(r);
        }
        Manifest::new(out)
    }

    fn relocate_all(&self, m: &Manifest) -> Manifest {
        Manifest {
            records: m.iter().map(|u| self.relocate(u)).collect(),
        }
    }
}

fn require_clean(m: &Manifest) -> Result<(), CorpusError> {
    match m.iter().find(|u| u.condition != Condition::Clean) {
        Some(u) => Err(CorpusError::Manifest(format!("{} is not clean", u.utt_id))),
        None => Ok(()),
    }
}

/// Adaptation pipeline splits. `p2` holds the clean originals of the p2
/// speakers; they are kept for evaluation and never part of [`train`](Self::train).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSplits {
    pub p1: Manifest,
    pub p1n: Manifest,
    pub p2: Manifest,
    pub p2n: Manifest,
    pub mixes: Vec<MixRecord>,
}

impl AdaptationSplits {
    pub fn train(&self) -> Manifest {
        Manifest {
            records: [&self.p1, &self.p1n, &self.p2n]
                .iter()
                .flat_map(|m| m.records.iter().cloned())
                .collect(),
        }
    }

    pub fn splits(&self) -> Vec<CorpusSplit> {
        let s = |name: &str, m: &Manifest| CorpusSplit {
            name: name.into(),
            manifest: m.clone(),
        };
        vec![
            s("p1", &self.p1),
            s("p1n", &self.p1n),
            s("p2n", &self.p2n),
            s("train", &self.train()),
        ]
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        Ok(Self {
            p1: Manifest::read(&dir.join("p1.tsv"))?,
            p1n: Manifest::read(&dir.join("p1n.tsv"))?,
            p2: Manifest::read(&dir.join("p2.tsv"))?,
            p2n: Manifest::read(&dir.join("p2n.tsv"))?,
            mixes: read_mixes(&dir.join(MIXES_FILE))?,
        })
    }
}

/// Partition speakers into p1/p2, give every utterance a noisy copy, and
/// write `p1.tsv`, `p1n.tsv`, `p2.tsv`, `p2n.tsv`, `train.tsv` and
/// `mixes.jsonl` into `out_dir`.
pub fn augment_adaptation(
    clean: &Manifest,
    manifest_dir: &Path,
    split_fraction: f64,
    snr: SnrRange,
    seed_value: u64,
    out_dir: &Path,
) -> Result<AdaptationSplits, CorpusError> {
    require_clean(clean)?;
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(CorpusError::Invalid(format!(
            "split_fraction {split_fraction} outside [0, 1]"
        )));
    }
    let mut speakers = clean.speakers();
    speakers.shuffle(&mut seed::rng(seed_value, "partition"));
    let k = (split_fraction * speakers.len() as f64).round() as usize;
    if k < 2 || speakers.len() - k < 2 {
        return Err(CorpusError::EmptyPartition(format!(
            "{} speakers at fraction {split_fraction} give {k}/{}; need >= 2 per side",
            speakers.len(),
            speakers.len() - k
        )));
    }
    let p1_spk: BTreeSet<&String> = speakers[..k].iter().collect();
    let aug = Augmenter::new(clean, manifest_dir, out_dir, snr, seed_value)?;
    let p1_src = clean.filter(|u| p1_spk.contains(&u.speaker_id));
    let p2_src = clean.filter(|u| !p1_spk.contains(&u.speaker_id));
    let mut mixes = Vec::new();
    let p1n = aug.noisy_copies(&p1_src, &mut mixes)?;
    let p2n = aug.noisy_copies(&p2_src, &mut mixes)?;
    let (p1, p2) = (aug.relocate_all(&p1_src), aug.relocate_all(&p2_src));
    let out = AdaptationSplits {
        p1,
        p1n,
        p2,
        p2n,
        mixes,
    };
    for (name, m) in [("p1", &out.p1), ("p1n", &out.p1n), ("p2", &out.p2), ("p2n", &out.p2n)] {
        m.write(&out_dir.join(format!("{name}.tsv")))?;
    }
    out.train().write(&out_dir.join("train.tsv"))?;
    write_mixes(&out_dir.join(MIXES_FILE), &out.mixes)?;
    Ok(out)
}

/// ⟨aud_ref, text, aud_tgt⟩. The text is the target utterance's tokens and the
/// domain label is the condition of `ref_utt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub triple_id: String,
    pub ref_utt: String,
    pub tgt_utt: String,
    pub label: Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSet {
    /// Clean originals followed by their noisy copies.
    pub manifest: Manifest,
    pub triples: Vec<Triple>,
    pub mixes: Vec<MixRecord>,
}

impl EncodingSet {
    pub fn count(&self, label: Condition) -> usize {
        self.triples.iter().filter(|t| t.label == label).count()
    }

    fn triples_text(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\t{}\n", t.triple_id, t.ref_utt, t.tgt_utt, t.label))
            .collect()
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join("triples.tsv");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let triples = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 4 {
                    return Err(CorpusError::Manifest(format!("bad triple line {l:?}")));
                }
                Ok(Triple {
                    triple_id: f[0].into(),
                    ref_utt: f[1].into(),
                    tgt_utt: f[2].into(),
                    label: f[3].parse()?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            manifest: Manifest::read(&dir.join("encoding.tsv"))?,
            triples,
            mixes: read_mixes(&dir.join(MIXES_FILE))?,
        })
    }
}

/// Double a clean training set: every clean self-triple gets a sibling whose
/// reference audio is a noisy copy while the target stays clean.
pub fn augment_encoding(
    clean: &Manifest,
    manifest_dir: &Path,
    snr: SnrRange,
    seed_value: u64,
    out_dir: &Path,
) -> Result<EncodingSet, CorpusError> {
    require_clean(clean)?;
    let aug = Augmenter::new(clean, manifest_dir, out_dir, snr, seed_value)?;
    let clean_rel = aug.relocate_all(clean);
    let mut mixes = Vec::new();
    let noisy = aug.noisy_copies(clean, &mut mixes)?;
    let mut triples = Vec::with_capacity(2 * clean.len());
    for u in clean_rel.iter() {
        triples.push(Triple {
            triple_id: format!("{}.c", u.utt_id),
            ref_utt: u.utt_id.clone(),
            tgt_utt: u.utt_id.clone(),
            label: Condition::Clean,
        });
    }
    for n in noisy.iter() {
        let parent = n.parent_utt.clone().expect("noisy copies carry a parent");
        triples.push(Triple {
            triple_id: format!("{parent}.n"),
            ref_utt: n.utt_id.clone(),
            tgt_utt: parent,
            label: Condition::Noisy,
        });
    }
    let out = EncodingSet {
        manifest: Manifest::concat(&[&clean_rel, &noisy])?,
        triples,
        mixes,
    };
    out.manifest.write(&out_dir.join("encoding.tsv"))?;
    let path = out_dir.join("triples.tsv");
    fs::write(&path, out.triples_text()).map_err(|e| io_err(&path, e))?;
    write_mixes(&out_dir.join(MIXES_FILE), &out.mixes)?;
    Ok(out)
}

/// Move the last `n_held_out` speakers (sorted by id) out of `clean`.
pub fn split_held_out(clean: &Manifest, n_held_out: usize) -> Result<(Manifest, Vec<String>), CorpusError> {
    let speakers = clean.speakers();
    if n_held_out == 0 || n_held_out >= speakers.len() {
        return Err(CorpusError::EmptyPartition(format!(
            "cannot hold out {n_held_out} of {} speakers",
            speakers.len()
        )));
    }
    let held: Vec<String> = speakers[speakers.len() - n_held_out..].to_vec();
    let base = clean.filter(|u| !held.contains(&u.speaker_id));
    Ok((base, held))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub name: String,
    pub speaker_id: String,
    pub condition: Condition,
    pub manifest: Manifest,
}

/// Per held-out speaker: a clean test set, its noisy counterpart, and an
/// adaptation pool of noisy copies of that speaker's remaining utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSets {
    pub sets: Vec<TestSet>,
    pub adapt: Manifest,
    pub mixes: Vec<MixRecord>,
}

impl TestSets {
    pub fn get(&self, speaker_id: &str, condition: Condition) -> Option<&TestSet> {
        self.sets
            .iter()
            .find(|s| s.speaker_id == speaker_id && s.condition == condition)
    }

    pub fn speakers(&self) -> Vec<String> {
        self.sets
            .iter()
            .map(|s| s.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Pool sets into `F-C`, `F-N`, `M-C`, `M-N`.
    pub fn by_group(&self, gender_of: impl Fn(&str) -> Option<Gender>) -> BTreeMap<String, Manifest> {
        let mut out: BTreeMap<String, Manifest> = BTreeMap::new();
        for s in &self.sets {
            if let Some(g) = gender_of(&s.speaker_id) {
                let name = format!("{}-{}", g.letter(), s.condition.letter());
                out.entry(name)
                    .or_default()
                    .records
                    .extend(s.manifest.records.iter().cloned());
            }
        }
        out
    }

    pub fn read(dir: &Path, speakers: &[String]) -> Result<Self, CorpusError> {
        let mut sets = Vec::new();
        for spk in speakers {
            for cond in [Condition::Clean, Condition::Noisy] {
                let name = format!("{spk}-{}", cond.letter());
                sets.push(TestSet {
                    manifest: Manifest::read(&dir.join(format!("test_{name}.tsv")))?,
                    name,
                    speaker_id: spk.clone(),
                    condition: cond,
                });
            }
        }
        Ok(Self {
            sets,
            adapt: Manifest::read(&dir.join("adapt.tsv"))?,
            mixes: read_mixes(&dir.join(MIXES_FILE))?,
        })
    }
}

/// Build test material for speakers that never appear in `train`. The first
/// `n_test` utterances of each speaker form its test sets.
#[allow(clippy::too_many_arguments)]
pub fn make_test_sets(
    clean: &Manifest,
    manifest_dir: &Path,
    held_out: &[String],
    train: &Manifest,
    n_test: usize,
    snr: SnrRange,
    seed_value: u64,
    out_dir: &Path,
) -> Result<TestSets, CorpusError> {
    require_clean(clean)?;
    let train_spk: BTreeSet<String> = train.speakers().into_iter().collect();
    let overlap: Vec<&String> = held_out.iter().filter(|s| train_spk.contains(*s)).collect();
    if !overlap.is_empty() {
        return Err(CorpusError::Overlap(format!("{overlap:?}")));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|u| u.utt_id.as_str()).collect();
    if let Some(u) = clean
        .iter()
        .find(|u| held_out.contains(&u.speaker_id) && train_ids.contains(u.utt_id.as_str()))
    {
        return Err(CorpusError::Overlap(format!("utterance {}", u.utt_id)));
    }
    let by_spk = clean.by_speaker();
    let aug = Augmenter::new(clean, manifest_dir, out_dir, snr, seed_value)?;
    let mut sets = Vec::new();
    let mut adapt_clean = Vec::new();
    let mut mixes = Vec::new();
    for spk in held_out {
        let utts = by_spk
            .get(spk)
            .ok_or_else(|| CorpusError::EmptyPartition(format!("no utterances for {spk}")))?;
        if utts.len() < n_test || n_test == 0 {
            return Err(CorpusError::EmptyPartition(format!(
                "{spk} has {} utterances, {n_test} requested for testing",
                utts.len()
            )));
        }
        let test_src = Manifest::new(utts[..n_test].iter().map(|&u| u.clone()).collect())?;
        let test_n = aug.noisy_copies(&test_src, &mut mixes)?;
        let test_c = aug.relocate_all(&test_src);
        adapt_clean.extend(utts[n_test..].iter().map(|&u| u.clone()));
        for (cond, m) in [(Condition::Clean, test_c), (Condition::Noisy, test_n)] {
            let name = format!("{spk}-{}", cond.letter());
            m.write(&out_dir.join(format!("test_{name}.tsv")))?;
            sets.push(TestSet {
                name,
                speaker_id: spk.clone(),
                condition: cond,
                manifest: m,
            });
        }
    }
    let adapt = aug.noisy_copies(&Manifest::new(adapt_clean)?, &mut mixes)?;
    adapt.write(&out_dir.join("adapt.tsv"))?;
    write_mixes(&out_dir.join(MIXES_FILE), &mixes)?;
    Ok(TestSets { sets, adapt, mixes })
}
