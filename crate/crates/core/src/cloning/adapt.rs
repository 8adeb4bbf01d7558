use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Condition;
use crate::diffcore::{clip_global_norm, Adam, Tensor};
use crate::model::{unit, AcousticModel, Group, SpeakerEncoder, Variant};
use crate::seed;
use crate::signal::cosine_similarity;

use super::train::{batch_gradients, frame_labels, tf_item, LogSink, StepLog};
use super::{CloningError, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Must be 0: the classifier loss is removed during adaptation.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Plateau when `L_rcon` improved by less than `plateau_tol` (relative)
    /// over the last `plateau_window` steps.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Steps averaged when comparing losses across the window.
    pub smoothing: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            learning_rate: 1e-5,
            batch_size: 8,
            max_steps: 2000,
            plateau_window: 200,
            plateau_tol: 1e-3,
            smoothing: 20,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: AcousticModel,
    /// Table row holding the target speaker.
    pub speaker_row: usize,
    pub steps: usize,
    /// False when `max_steps` ran out before the plateau rule fired.
    pub converged: bool,
    /// Tag synthesis must use with the adapted model.
    pub synthesis_tag: Condition,
    /// One line per recipe step, in execution order.
    pub recipe: Vec<String>,
    pub log: Vec<StepLog>,
}

/// Mean of unit embeddings, re-normalised.
fn mean_embedding(enc: &SpeakerEncoder, mels: &[Tensor]) -> Result<Vec<f64>, CloningError> {
    if mels.is_empty() {
        return Err(CloningError::Data("no utterances to embed".into()));
    }
    let mut acc = vec![0.0; enc.config.d_emb];
    for m in mels {
        for (a, v) in acc.iter_mut().zip(enc.embed(m)?) {
            *a += v;
        }
    }
    Ok(unit(&acc))
}

/// Training speaker whose mean embedding is closest (cosine) to the target's.
/// Ties go to the smallest speaker id.
pub fn select_donor_speaker(
    enc: &SpeakerEncoder,
    target: &[Tensor],
    candidates: &BTreeMap<String, Vec<Tensor>>,
) -> Result<String, CloningError> {
    if candidates.is_empty() {
        return Err(CloningError::Data("no candidate speakers".into()));
    }
    let t = mean_embedding(enc, target)?;
    let mut best: Option<(f64, &String)> = None;
    for (id, mels) in candidates {
        let c = cosine_similarity(&t, &mean_embedding(enc, mels)?)?;
        if best.is_none_or(|(b, _)| c > b) {
            best = Some((c, id));
        }
    }
    Ok(best.expect("non-empty").1.clone())
}

/// Few-shot adaptation of an adaptation-variant base model.
///
/// `targets` are the noisy, transcribed utterances of one new speaker and
/// `donor_row` is the table row whose embedding seeds the new speaker.
pub fn few_shot_adapt(
    base: &AcousticModel,
    targets: &[Example],
    donor_row: usize,
    cfg: &AdaptConfig,
    log_dir: Option<&std::path::Path>,
) -> Result<AdaptOutcome, CloningError> {
    if base.variant() != Variant::Adaptation {
        return Err(CloningError::Config(
            "few-shot adaptation needs the adaptation variant".into(),
        ));
    }
    if cfg.lambda != 0.0 {
        return Err(CloningError::Recipe(format!(
            "classifier loss must be removed during adaptation, got lambda {}",
            cfg.lambda
        )));
    }
    if targets.is_empty() {
        return Err(CloningError::Data("no adaptation utterances".into()));
    }
    if let Some(e) = targets.iter().find(|e| e.tokens.is_empty()) {
        return Err(CloningError::Data(format!("{} has no transcript", e.utt_id)));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || cfg.max_steps == 0 || cfg.plateau_window == 0 {
        return Err(CloningError::Config("invalid adaptation schedule".into()));
    }
    let speaker_id = &targets[0].speaker_id;
    if targets.iter().any(|e| &e.speaker_id != speaker_id) {
        return Err(CloningError::Data(
            "adaptation utterances must share one speaker".into(),
        ));
    }
    let donor = base
        .speaker_table()
        .filter(|t| donor_row < t.rows())
        .ok_or_else(|| CloningError::Config(format!("donor row {donor_row} outside the speaker table")))?
        .row(donor_row)
        .to_vec();

    let mut recipe = Vec::new();
    let mut model = base.clone();
    // 1: every adaptation sample is tagged noisy.
    recipe.push(format!("1 tag=noisy for {} utterances", targets.len()));
    // 2: classifier frozen and its loss dropped.
    let trainable: Vec<bool> = model
        .params
        .ids()
        .map(|id| !matches!(model.group(id), Group::Buffer | Group::Classifier))
        .collect();
    recipe.push("2 domain classifier loss removed, classifier frozen".into());
    // 3: new table row initialised from the donor.
    let row = model.add_speaker(&donor)?;
    recipe.push(format!("3 speaker row {row} initialised from donor row {donor_row}"));
    let mut speakers = vec![String::new(); row];
    speakers.push(speaker_id.clone());
    let items = targets
        .iter()
        .map(|e| tf_item(&model, e, &speakers, Some(Condition::Noisy)))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = frame_labels(&items);

    // 4: fine-tune everything else until the plateau rule fires.
    let trainable: Vec<bool> = {
        let mut t = trainable;
        t.resize(model.params.len(), true);
        t
    };
    let mut adam = Adam::new(&model.params);
    let mut rng = seed::rng(cfg.seed, "adapt-batches");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut sink = LogSink::create(log_dir, "adapt_log.jsonl")?;
    let mut log: Vec<StepLog> = Vec::new();
    let mut converged = false;
    for step in 0..cfg.max_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let its: Vec<_> = batch.iter().map(|&i| &items[i]).collect();
        let labs: Vec<Vec<usize>> = batch.iter().map(|&i| labels[i].clone()).collect();
        let dseed = seed::derive(cfg.seed, &format!("adapt-dropout/{step}"));
        let (parts, mut grads) = batch_gradients(&model, &its, &labs, 0.0, dseed, &trainable, false, [1.0; 2])?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !parts.total.is_finite() || !grad_norm.is_finite() {
            return Err(CloningError::Divergence {
                step,
                reason: format!("adaptation loss {}", parts.total),
            });
        }
        adam.step(&mut model.params, &grads, cfg.learning_rate, |id| trainable[id.index()])?;
        let rec = StepLog {
            step,
            loss: parts.total,
            l_rcon: parts.rcon,
            l_noise_ce: parts.ce,
            lambda: 0.0,
            cls_accuracy: parts.accuracy,
            grad_norm,
            lr: cfg.learning_rate,
        };
        sink.write(&rec)?;
        log.push(rec);
        if plateaued(&log, cfg) {
            converged = true;
            break;
        }
    }
    let steps = log.len();
    recipe.push(format!(
        "4 fine-tuned {steps} steps at lr {}, {}",
        cfg.learning_rate,
        if converged {
            "plateau reached"
        } else {
            "max_steps reached without plateau"
        }
    ));
    recipe.push("5 synthesis uses tag=clean".into());
    Ok(AdaptOutcome {
        model,
        speaker_row: row,
        steps,
        converged,
        synthesis_tag: Condition::Clean,
        recipe,
        log,
    })
}

fn plateaued(log: &[StepLog], cfg: &AdaptConfig) -> bool {
    let k = cfg.smoothing.max(1);
    let n = log.len();
    if n < cfg.plateau_window + k {
        return false;
    }
    let mean = |end: usize| log[end - k..end].iter().map(|r| r.l_rcon).sum::<f64>() / k as f64;
    let (before, now) = (mean(n - cfg.plateau_window), mean(n));
    (before - now) / before.abs().max(1e-12) < cfg.plateau_tol
}

/// Speaker vector from one or more untranscribed utterances. Reads the
/// encoder only; nothing is updated.
pub fn one_shot_encode(enc: &SpeakerEncoder, mels: &[Tensor]) -> Result<Vec<f64>, CloningError> {
    mean_embedding(enc, mels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TdnnConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mel(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
        Tensor::new(t, 32, (0..t * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn donor_selection_rules() {
        let enc = SpeakerEncoder::new(TdnnConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cands = BTreeMap::new();
        for s in ["s0", "s1", "s2", "s3"] {
            cands.insert(s.to_string(), vec![mel(&mut rng, 30), mel(&mut rng, 35)]);
        }
        // Copies of one candidate's audio select that candidate.
        assert_eq!(select_donor_speaker(&enc, &cands["s2"], &cands).unwrap(), "s2");
        // Identical candidates tie; the smaller id wins.
        let mut tied = cands.clone();
        tied.insert("s9".into(), cands["s1"].clone());
        tied.insert("s0".into(), cands["s1"].clone());
        assert_eq!(select_donor_speaker(&enc, &cands["s1"], &tied).unwrap(), "s0");
        // Random target: agree with brute force.
        let target = vec![mel(&mut rng, 40)];
        let t = one_shot_encode(&enc, &target).unwrap();
        let brute = cands
            .iter()
            .map(|(id, m)| (cosine_similarity(&t, &one_shot_encode(&enc, m).unwrap()).unwrap(), id))
            .fold(None::<(f64, &String)>, |b, x| {
                if b.is_none_or(|b| x.0 > b.0) {
                    Some(x)
                } else {
                    b
                }
            })
            .unwrap();
        assert_eq!(&select_donor_speaker(&enc, &target, &cands).unwrap(), brute.1);
        assert!(select_donor_speaker(&enc, &[], &cands).is_err());
        assert!(select_donor_speaker(&enc, &target, &BTreeMap::new()).is_err());
    }

    #[test]
    fn one_shot_pooling() {
        let enc = SpeakerEncoder::new(TdnnConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = mel(&mut rng, 30);
        let single = one_shot_encode(&enc, std::slice::from_ref(&m)).unwrap();
        assert_eq!(single, enc.embed(&m).unwrap());
        let five = one_shot_encode(&enc, &vec![m; 5]).unwrap();
        for (a, b) in single.iter().zip(&five) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(one_shot_encode(&enc, &[]).is_err());
    }

    fn targets() -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..3)
            .map(|i| Example {
                utt_id: format!("t{i}"),
                speaker_id: "new".into(),
                tokens: vec![1, 2, i],
                mel: mel(&mut rng, 8),
                condition: Condition::Noisy,
                xvec: None,
            })
            .collect()
    }

    #[test]
    fn adaptation_freezes_classifier_and_records_recipe() {
        let base = AcousticModel::new(ModelConfig::toy(Variant::Adaptation), 5).unwrap();
        let cfg = AdaptConfig {
            max_steps: 5,
            batch_size: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let out = few_shot_adapt(&base, &targets(), 3, &cfg, None).unwrap();
        assert_eq!(out.speaker_row, 8);
        assert_eq!(out.steps, 5);
        assert!(!out.converged);
        assert_eq!(out.synthesis_tag, Condition::Clean);
        assert_eq!(out.recipe.len(), 5);
        assert!(out
            .recipe
            .iter()
            .enumerate()
            .all(|(i, l)| l.starts_with(&(i + 1).to_string())));
        for (name, t) in base.params.iter() {
            let after = out.model.params.get(out.model.params.require(name).unwrap());
            match name {
                n if n.starts_with("cls.") || n.starts_with("norm.") => assert_eq!(t, after, "{n}"),
                "spk.table" => {
                    assert_eq!(&after.data()[..t.len()], t.data());
                    assert_ne!(after.row(8), t.row(3));
                }
                n if n.starts_with("dec.") => assert_ne!(t, after, "{n}"),
                _ => {}
            }
        }
        assert!(out.log.iter().all(|r| r.loss == r.l_rcon));
        let bad = AdaptConfig {
            lambda: 0.1,
            ..cfg.clone()
        };
        assert!(matches!(
            few_shot_adapt(&base, &targets(), 3, &bad, None),
            Err(CloningError::Recipe(_))
        ));
        assert!(few_shot_adapt(&base, &targets(), 8, &cfg, None).is_err());
    }

    #[test]
    fn plateau_rule() {
        let cfg = AdaptConfig {
            plateau_window: 10,
            smoothing: 2,
            ..Default::default()
        };
        let rec = |l: f64| StepLog {
            step: 0,
            loss: l,
            l_rcon: l,
            l_noise_ce: 0.0,
            lambda: 0.0,
            cls_accuracy: 0.0,
            grad_norm: 0.0,
            lr: 0.0,
        };
        let flat: Vec<StepLog> = (0..12).map(|_| rec(1.0)).collect();
        assert!(plateaued(&flat, &cfg));
        let falling: Vec<StepLog> = (0..12).map(|i| rec(1.0 - 0.01 * i as f64)).collect();
        assert!(!plateaued(&falling, &cfg));
        assert!(!plateaued(&flat[..11], &cfg));
    }
}
