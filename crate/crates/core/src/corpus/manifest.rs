//! Line-delimited utterance manifests.
//!
//! One record per line, tab-separated, fixed field order:
//!
//! ```text
//! utt_id  speaker_id  tokens  wav_path  condition  snr_db  parent_utt
//! ```
//!
//! `tokens` are space-separated integers, `condition` is `clean` or `noisy`,
//! and missing optional fields are written as `-`. `wav_path` is relative to
//! the manifest's directory unless absolute.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    /// Class index used by the domain classifier and the noise tag table.
    pub fn index(self) -> usize {
        match self {
            Condition::Clean => 0,
            Condition::Noisy => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Condition::Clean),
            1 => Some(Condition::Noisy),
            _ => None,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Condition::Clean => "C",
            Condition::Noisy => "N",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        })
    }
}

impl FromStr for Condition {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Condition::Clean),
            "noisy" => Ok(Condition::Noisy),
            other => Err(CorpusError::Manifest(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub tokens: Vec<usize>,
    pub wav_path: PathBuf,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub parent_utt: Option<String>,
}

impl Utterance {
    pub fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Manifest(format!("{}: {m}", self.utt_id)));
        if self.utt_id.is_empty() || self.utt_id.contains(['\t', '\n']) {
            return bad("invalid utt_id");
        }
        if self.tokens.is_empty() {
            return bad("empty token sequence");
        }
        match self.condition {
            Condition::Noisy if self.snr_db.is_none() || self.parent_utt.is_none() => {
                bad("noisy entries need snr_db and parent_utt")
            }
            Condition::Clean if self.snr_db.is_some() || self.parent_utt.is_some() => {
                bad("clean entries carry neither snr_db nor parent_utt")
            }
            _ => Ok(()),
        }
    }

    fn to_line(&self) -> String {
        let tokens = self.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let snr = self.snr_db.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let parent = self.parent_utt.clone().unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.utt_id,
            self.speaker_id,
            tokens,
            self.wav_path.display(),
            self.condition,
            snr,
            parent
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self, CorpusError> {
        let err = |m: String| CorpusError::Manifest(format!("line {lineno}: {m}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let tokens = fields[2]
            .split(' ')
            .map(|t| t.parse::<usize>().map_err(|e| err(format!("token {t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let snr_db = match fields[5] {
            "-" => None,
            v => Some(v.parse::<f64>().map_err(|e| err(format!("snr {v:?}: {e}")))?),
        };
        let parent_utt = match fields[6] {
            "-" => None,
            v => Some(v.to_string()),
        };
        let u = Self {
            utt_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            tokens,
            wav_path: PathBuf::from(fields[3]),
            condition: fields[4].parse()?,
            snr_db,
            parent_utt,
        };
        u.check()?;
        Ok(u)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Utterance>,
}

impl Manifest {
    pub fn new(records: Vec<Utterance>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            r.check()?;
            if !seen.insert(r.utt_id.as_str()) {
                return Err(CorpusError::Manifest(format!("duplicate utt_id {}", r.utt_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.records.iter()
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.records.iter().find(|u| u.utt_id == utt_id)
    }

    pub fn speakers(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|u| u.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn by_speaker(&self) -> BTreeMap<String, Vec<&Utterance>> {
        let mut out: BTreeMap<String, Vec<&Utterance>> = BTreeMap::new();
        for u in &self.records {
            out.entry(u.speaker_id.clone()).or_default().push(u);
        }
        out
    }

    pub fn count(&self, condition: Condition) -> usize {
        self.records.iter().filter(|u| u.condition == condition).count()
    }

    pub fn filter(&self, keep: impl Fn(&Utterance) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|u| keep(u)).cloned().collect(),
        }
    }

    /// Concatenate manifests; utt_ids must stay unique.
    pub fn concat(parts: &[&Manifest]) -> Result<Self, CorpusError> {
        Self::new(parts.iter().flat_map(|m| m.records.iter().cloned()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Utterance::from_line(l, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(records)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Copy with every wav path rewritten so the manifest can live in `to`.
    pub fn relocated(&self, from: &Path, to: &Path) -> Result<Self, CorpusError> {
        let canon = |p: &Path| {
            p.canonicalize()
                .map_err(|e| CorpusError::Io(format!("{}: {e}", p.display())))
        };
        let (from, to) = (canon(from)?, canon(to)?);
        let records = self
            .iter()
            .map(|u| {
                let abs = resolve_wav(&from, &u.wav_path);
                Utterance {
                    wav_path: pathdiff::diff_paths(&abs, &to).unwrap_or(abs),
                    ..u.clone()
                }
            })
            .collect();
        Ok(Self { records })
    }
}

/// Resolve a manifest-relative wav path.
pub fn resolve_wav(manifest_dir: &Path, wav: &Path) -> PathBuf {
    if wav.is_absolute() {
        wav.to_path_buf()
    } else {
        manifest_dir.join(wav)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clean(id: &str) -> Utterance {
        Utterance {
            utt_id: id.into(),
            speaker_id: "spk00".into(),
            tokens: vec![1, 2, 3],
            wav_path: PathBuf::from(format!("wavs/{id}.wav")),
            condition: Condition::Clean,
            snr_db: None,
            parent_utt: None,
        }
    }

    #[test]
    fn line_format_is_fixed() {
        let mut n = clean("a-n");
        n.condition = Condition::Noisy;
        n.snr_db = Some(12.5);
        n.parent_utt = Some("a".into());
        let m = Manifest::new(vec![clean("a"), n]).unwrap();
        assert_eq!(
            m.to_text(),
            "a\tspk00\t1 2 3\twavs/a.wav\tclean\t-\t-\n\
             a-n\tspk00\t1 2 3\twavs/a-n.wav\tnoisy\t12.500000\ta\n"
        );
    }

    #[test]
    fn invariants_enforced() {
        let mut n = clean("x");
        n.condition = Condition::Noisy;
        assert!(n.check().is_err());
        let mut c = clean("y");
        c.snr_db = Some(3.0);
        assert!(c.check().is_err());
        assert!(Manifest::new(vec![clean("z"), clean("z")]).is_err());
        assert!(Manifest::parse("only\tthree\tfields\n").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            tokens in proptest::collection::vec(0usize..50, 1..10),
            snr in proptest::option::of(0.0f64..30.0),
        ) {
            let mut u = clean("u1");
            u.tokens = tokens;
            if let Some(s) = snr {
                u.condition = Condition::Noisy;
                u.snr_db = Some((s * 1e6).round() / 1e6);
                u.parent_utt = Some("u0".into());
            }
            let m = Manifest::new(vec![u]).unwrap();
            let back = Manifest::parse(&m.to_text()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
