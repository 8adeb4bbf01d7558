//! Synthesis metrics and the evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloning::Example;
use crate::corpus::{Condition, Manifest};
use crate::diffcore::{file_hash, Tensor};
use crate::model::{AcousticModel, Dropout, SpeakerEncoder, SpeakerInput};
use crate::seed;
use crate::signal::{cosine_similarity, mcd, AnalysisConfig, MelCepstra, MelSpectrogram};

use super::EvalError;

pub const CEPSTRAL_ORDER: usize = 13;
pub const REPORT_JSONL: &str = "report.jsonl";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisMetrics {
    pub mcd: Vec<f64>,
    pub cosine: Vec<f64>,
    /// Utterances whose generation hit the frame budget.
    pub budget_exhausted: usize,
    pub mels: Vec<MelSpectrogram>,
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Some((m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()))
}

/// Repeat the last frame until `mel` covers `min_frames`.
pub fn edge_pad(mel: &Tensor, min_frames: usize) -> Tensor {
    if mel.rows() >= min_frames {
        return mel.clone();
    }
    let mut rows: Vec<Vec<f64>> = (0..mel.rows()).map(|t| mel.row(t).to_vec()).collect();
    let last = rows.last().cloned().unwrap_or_else(|| vec![0.0; mel.cols()]);
    rows.resize(min_frames, last);
    Tensor::from_rows(&rows).expect("rectangular")
}

/// Synthesize every reference's text and compare to the reference audio:
/// MCD over DTW-aligned cepstra and, given an encoder, embedding cosine
/// similarity.
pub fn evaluate_synthesis(
    model: &AcousticModel,
    refs: &[Example],
    speaker: &SpeakerInput,
    tag: Option<Condition>,
    enc: Option<&SpeakerEncoder>,
    analysis: &AnalysisConfig,
    seed_value: u64,
) -> Result<SynthesisMetrics, EvalError> {
    let mut out = SynthesisMetrics::default();
    for (k, r) in refs.iter().enumerate() {
        let budget = 2 * r.mel.rows() + 20;
        let d = Dropout::Seeded(seed::derive(seed_value, &format!("synth/{k}")));
        let syn = model.synthesize(&r.tokens, speaker, tag, budget, d, analysis)?;
        out.budget_exhausted += usize::from(syn.budget_exhausted);
        let ref_mel = MelSpectrogram::new((0..r.mel.rows()).map(|t| r.mel.row(t).to_vec()).collect(), analysis)?;
        let a = MelCepstra::from_mel(&ref_mel, CEPSTRAL_ORDER)?;
        let b = MelCepstra::from_mel(&syn.mel, CEPSTRAL_ORDER)?;
        out.mcd.push(mcd(&a, &b)?.mcd_db);
        if let Some(enc) = enc {
            let rf = enc.config.receptive_field();
            let syn_t = Tensor::from_rows(&syn.mel.frames)?;
            let e_syn = enc.embed(&edge_pad(&syn_t, rf))?;
            let e_ref = enc.embed(&edge_pad(&r.mel, rf))?;
            out.cosine.push(cosine_similarity(&e_syn, &e_ref)?);
        }
        out.mels.push(syn.mel);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub set: String,
    pub model: String,
    pub n: usize,
    /// Mean and standard deviation, when measured.
    pub mcd: Option<(f64, f64)>,
    pub cosine: Option<(f64, f64)>,
    pub probe_accuracy: Option<f64>,
    pub checkpoint_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
}

impl EvalRow {
    pub fn from_metrics(
        set: &str,
        model: &str,
        m: &SynthesisMetrics,
        checkpoint_hash: String,
        manifest: &Manifest,
        seed_value: u64,
    ) -> Self {
        Self {
            set: set.into(),
            model: model.into(),
            n: m.mcd.len(),
            mcd: mean_std(&m.mcd),
            cosine: mean_std(&m.cosine),
            probe_accuracy: None,
            checkpoint_hash,
            manifest_hash: manifest.hash(),
            seed: seed_value,
        }
    }

    /// Recompute the input hashes and compare.
    pub fn verify_inputs(&self, checkpoint: &Path, manifest: &Path) -> Result<(), EvalError> {
        let ck = file_hash(checkpoint).map_err(|e| EvalError::Io(format!("{}: {e}", checkpoint.display())))?;
        let mf = Manifest::read(manifest)?.hash();
        if ck != self.checkpoint_hash {
            return Err(EvalError::HashMismatch(format!("checkpoint {}", checkpoint.display())));
        }
        if mf != self.manifest_hash {
            return Err(EvalError::HashMismatch(format!("manifest {}", manifest.display())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Insert `row`, replacing any row with the same set and model. When the
    /// old row came from the same inputs, measurements the new row lacks are
    /// kept. Rows stay sorted by (set, model) so the output does not depend
    /// on call order.
    pub fn upsert(&mut self, mut row: EvalRow) {
        let key = |r: &EvalRow| (r.set.clone(), r.model.clone());
        if let Some(i) = self.rows.iter().position(|r| key(r) == key(&row)) {
            let old = self.rows.remove(i);
            if (&old.checkpoint_hash, &old.manifest_hash, old.seed)
                == (&row.checkpoint_hash, &row.manifest_hash, row.seed)
            {
                row.mcd = row.mcd.or(old.mcd);
                row.cosine = row.cosine.or(old.cosine);
                row.probe_accuracy = row.probe_accuracy.or(old.probe_accuracy);
                row.n = row.n.max(old.n);
            }
        }
        self.rows.push(row);
        self.rows.sort_by(|a, b| (&a.set, &a.model).cmp(&(&b.set, &b.model)));
    }

    pub fn read(dir: &Path) -> Result<Self, EvalError> {
        let p = dir.join(REPORT_JSONL);
        let text = fs::read_to_string(&p).map_err(|e| EvalError::Io(format!("{}: {e}", p.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| EvalError::Data(format!("report line: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<(f64, f64)>| v.map_or("-".into(), |(m, s)| format!("{m:.3} ± {s:.3}"));
        let mut out = format!(
            "{:<16} {:<20} {:>4} {:>18} {:>18} {:>7} {:<12} {:<12} {:>6}\n",
            "set", "model", "n", "MCD (dB)", "SIM-COS", "probe", "ckpt", "manifest", "seed"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:<20} {:>4} {:>18} {:>18} {:>7} {:<12} {:<12} {:>6}",
                r.set,
                r.model,
                r.n,
                fmt(r.mcd),
                fmt(r.cosine),
                r.probe_accuracy.map_or("-".into(), |p| format!("{p:.4}")),
                &r.checkpoint_hash[..r.checkpoint_hash.len().min(12)],
                &r.manifest_hash[..r.manifest_hash.len().min(12)],
                r.seed
            );
        }
        out
    }

    /// Write `report.jsonl` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        let io = |p: &Path, e: std::io::Error| EvalError::Io(format!("{}: {e}", p.display()));
        let j = dir.join(REPORT_JSONL);
        fs::write(&j, self.to_jsonl()).map_err(|e| io(&j, e))?;
        let t = dir.join(REPORT_TABLE);
        fs::write(&t, self.to_table()).map_err(|e| io(&t, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> EvalRow {
        EvalRow {
            set: "spk9-C".into(),
            model: "adapted".into(),
            n: 4,
            mcd: Some((5.25, 0.5)),
            cosine: Some((0.8, 0.1)),
            probe_accuracy: Some(0.61),
            checkpoint_hash: "ab".repeat(32),
            manifest_hash: "cd".repeat(32),
            seed: 3,
        }
    }

    #[test]
    fn jsonl_round_trip_and_table() {
        let r = EvalReport {
            rows: vec![row(), row()],
        };
        assert_eq!(EvalReport::from_jsonl(&r.to_jsonl()).unwrap(), r);
        let t = r.to_table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("5.250 ± 0.500") && t.contains("0.6100"));
    }

    #[test]
    fn upsert_replaces_and_sorts() {
        let mut r = EvalReport::default();
        let mut b = row();
        b.set = "b".into();
        r.upsert(b.clone());
        r.upsert(row());
        b.n = 7;
        b.mcd = None;
        r.upsert(b.clone());
        assert_eq!(r.rows.len(), 2);
        assert_eq!((r.rows[0].set.as_str(), r.rows[0].n, r.rows[1].n), ("b", 7, 4));
        assert_eq!(r.rows[0].mcd, Some((5.25, 0.5)), "same inputs keep the old MCD");
        b.seed = 99;
        r.upsert(b);
        assert_eq!(r.rows[0].mcd, None, "new inputs replace the row outright");
    }

    #[test]
    fn tampering_is_detected() {
        let d = tempfile::tempdir().unwrap();
        let (ck, mf) = (d.path().join("m.ckpt"), d.path().join("m.tsv"));
        fs::write(&ck, b"weights").unwrap();
        let m = Manifest::default();
        m.write(&mf).unwrap();
        let mut r = row();
        r.checkpoint_hash = file_hash(&ck).unwrap();
        r.manifest_hash = m.hash();
        r.verify_inputs(&ck, &mf).unwrap();
        fs::write(&ck, b"weightz").unwrap();
        assert!(matches!(r.verify_inputs(&ck, &mf), Err(EvalError::HashMismatch(_))));
    }

    #[test]
    fn mean_std_and_padding() {
        assert_eq!(mean_std(&[1.0, 3.0]), Some((2.0, 1.0)));
        assert_eq!(mean_std(&[]), None);
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = edge_pad(&t, 4);
        assert_eq!(p.rows(), 4);
        assert_eq!(p.row(3), &[3.0, 4.0]);
    }
}
