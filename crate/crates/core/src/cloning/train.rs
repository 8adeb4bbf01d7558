use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Condition;
use crate::diffcore::{clip_global_norm, Adam, DiffError, Tape, Tensor, Var};
use crate::model::{
    save_model, AcousticModel, Dropout, Fwd, Group, ModelError, ReconLoss, SpeakerInput, TfItem, TfVars, Variant,
};
use crate::seed;

use super::{band_stats, speaker_index, CloningError, Example};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Save `step_XXXXXX.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Weight clean and noisy frames so both classes contribute equally to
    /// the classifier loss over the training set.
    pub balance_domain_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Adaptation,
            lambda: 0.1,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 200,
            max_steps: 2000,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            balance_domain_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CloningError> {
        let bad = |m: String| Err(CloningError::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return bad("batch_size and max_steps must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0".into());
        }
        Ok(())
    }
}

/// Scalar terms of one batch. `total` is always `rcon + lambda * ce`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rcon: f64,
    pub ce: f64,
    pub lambda: f64,
    pub accuracy: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_rcon")]
    pub l_rcon: f64,
    #[serde(rename = "L_noise_ce")]
    pub l_noise_ce: f64,
    pub lambda: f64,
    pub cls_accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AcousticModel,
    /// Speaker-table row order (adaptation variant).
    pub speakers: Vec<String>,
    pub log: Vec<StepLog>,
}

/// Batch objective on `tape` plus its reported decomposition.
///
/// Both terms are averages over all valid frames of the batch; a frame's
/// cross-entropy is multiplied by `class_weights[label]`. The domain logits
/// must already pass through a reversal of strength `lambda`: the objective
/// adds the plain cross-entropy, so the classifier sees its full gradient
/// while everything before the reversal sees `−λ` times it. The reported
/// total is `L_rcon + λ·L_noise_ce`.
pub fn total_loss(
    tape: &mut Tape,
    outs: &[TfVars],
    targets: &[&Tensor],
    labels: &[Vec<usize>],
    lambda: f64,
    recon: ReconLoss,
    class_weights: [f64; 2],
) -> Result<(Var, LossParts), CloningError> {
    if outs.len() != targets.len() || outs.len() != labels.len() || outs.is_empty() {
        return Err(CloningError::Data(format!(
            "{} outputs, {} targets, {} label sequences",
            outs.len(),
            targets.len(),
            labels.len()
        )));
    }
    let frames: usize = targets.iter().map(|t| t.rows()).sum();
    let mut terms = Vec::new();
    let (mut rcon, mut ce, mut correct) = (0.0, 0.0, 0usize);
    for ((o, target), lab) in outs.iter().zip(targets).zip(labels) {
        let t = target.rows();
        if lab.len() != t || tape.value(o.logits).rows() != t {
            return Err(CloningError::Data(format!("{} labels for {t} frames", lab.len())));
        }
        let w = t as f64 / frames as f64;
        let r = match recon {
            ReconLoss::L1 => tape.l1_loss(o.pred, target)?,
            ReconLoss::L2 => tape.l2_loss(o.pred, target)?,
        };
        rcon += w * tape.value(r).item();
        terms.push(tape.scale(r, w)?);
        let logits = tape.value(o.logits);
        correct += (0..t)
            .filter(|&i| usize::from(logits.get(i, 1) > logits.get(i, 0)) == lab[i])
            .count();
        for (class, &cw) in class_weights.iter().enumerate() {
            let rows: Vec<usize> = (0..t).filter(|&i| lab[i] == class).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = if rows.len() == t {
                o.logits
            } else {
                tape.embedding_lookup(o.logits, &rows)?
            };
            let c = tape.cross_entropy(sub, &vec![class; rows.len()])?;
            let wc = rows.len() as f64 / frames as f64 * cw;
            ce += wc * tape.value(c).item();
            terms.push(tape.scale(c, wc)?);
        }
    }
    let mut obj = terms[0];
    for &v in &terms[1..] {
        obj = tape.add(obj, v)?;
    }
    Ok((
        obj,
        LossParts {
            total: rcon + lambda * ce,
            rcon,
            ce,
            lambda,
            accuracy: correct as f64 / frames as f64,
            frames,
        },
    ))
}

/// Teacher-forcing item for `e`, frames normalised with the model statistics.
pub fn tf_item(
    model: &AcousticModel,
    e: &Example,
    speakers: &[String],
    tag: Option<Condition>,
) -> Result<TfItem, CloningError> {
    let speaker = match model.variant() {
        Variant::Adaptation => SpeakerInput::Table(
            speakers
                .iter()
                .position(|s| *s == e.speaker_id)
                .ok_or_else(|| CloningError::Data(format!("speaker {} has no table row", e.speaker_id)))?,
        ),
        Variant::Encoding => SpeakerInput::Vector(
            e.xvec
                .clone()
                .ok_or_else(|| CloningError::Data(format!("{} has no speaker vector", e.utt_id)))?,
        ),
    };
    let frames = normalized(model, &e.mel);
    Ok(TfItem {
        tokens: e.tokens.clone(),
        frames,
        speaker,
        tag: (model.variant() == Variant::Adaptation).then_some(tag.unwrap_or(e.condition)),
    })
}

/// `mel` in the model's normalised feature space.
pub fn normalized(model: &AcousticModel, mel: &Tensor) -> Tensor {
    let m = model
        .params
        .get(model.params.require("norm.mean").expect("model has norm.mean"));
    let s = model
        .params
        .get(model.params.require("norm.std").expect("model has norm.std"));
    let c = mel.cols();
    let data = mel
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - m.data()[i % c]) / s.data()[i % c])
        .collect();
    Tensor::new(mel.rows(), c, data).expect("same shape")
}

/// Loss and per-parameter gradients for one batch. Untrainable parameters
/// get zero gradients. `with_classifier = false` drops the domain term from
/// the objective (it is still reported).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_gradients(
    model: &AcousticModel,
    items: &[&TfItem],
    labels: &[Vec<usize>],
    lambda: f64,
    dropout_seed: u64,
    trainable: &[bool],
    with_classifier: bool,
    class_weights: [f64; 2],
) -> Result<(LossParts, Vec<Tensor>), CloningError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |id| trainable[id.index()])?;
    let mut outs = Vec::with_capacity(items.len());
    {
        let mut f = Fwd::new(model, &mut tape, &bound);
        for (k, it) in items.iter().enumerate() {
            let d = Dropout::Seeded(seed::derive(dropout_seed, &format!("item/{k}")));
            outs.push(f.teacher_forced(it, lambda, d)?);
        }
    }
    let targets: Vec<&Tensor> = items.iter().map(|i| &i.frames).collect();
    let (obj, parts) = if with_classifier {
        total_loss(
            &mut tape,
            &outs,
            &targets,
            labels,
            lambda,
            model.config.recon_loss,
            class_weights,
        )?
    } else {
        let (_, mut parts) = total_loss(
            &mut tape,
            &outs,
            &targets,
            labels,
            0.0,
            model.config.recon_loss,
            class_weights,
        )?;
        // Rebuild the objective from reconstruction terms only.
        let mut obj = None;
        for (o, t) in outs.iter().zip(&targets) {
            let r = match model.config.recon_loss {
                ReconLoss::L1 => tape.l1_loss(o.pred, t)?,
                ReconLoss::L2 => tape.l2_loss(o.pred, t)?,
            };
            let r = tape.scale(r, t.rows() as f64 / parts.frames as f64)?;
            obj = Some(match obj {
                None => r,
                Some(a) => tape.add(a, r)?,
            });
        }
        parts.lambda = 0.0;
        parts.total = parts.rcon;
        (obj.expect("non-empty batch"), parts)
    };
    let mut g = tape.backward(obj)?;
    Ok((parts, bound.collect(&model.params, &mut g)))
}

/// `F / (2·F_c)` per class over all frames; a class without frames keeps 1.
fn balanced_weights(labels: &[Vec<usize>]) -> [f64; 2] {
    let mut n = [0usize; 2];
    labels.iter().flatten().for_each(|&l| n[l] += 1);
    let total = (n[0] + n[1]) as f64;
    if n[0] == 0 || n[1] == 0 {
        return [1.0; 2];
    }
    [total / (2.0 * n[0] as f64), total / (2.0 * n[1] as f64)]
}

pub(crate) fn frame_labels(items: &[TfItem]) -> Vec<Vec<usize>> {
    items
        .iter()
        .map(|it| vec![it.tag.unwrap_or(Condition::Clean).index(); it.frames.rows()])
        .collect()
}

pub(crate) struct LogSink(Option<File>);

impl LogSink {
    pub(crate) fn create(dir: Option<&Path>, name: &str) -> Result<Self, CloningError> {
        let Some(dir) = dir else {
            return Ok(Self(None));
        };
        fs::create_dir_all(dir).map_err(|e| CloningError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(name);
        File::create(&path)
            .map(|f| Self(Some(f)))
            .map_err(|e| CloningError::Io(format!("{}: {e}", path.display())))
    }

    pub(crate) fn write(&mut self, rec: &impl Serialize) -> Result<(), CloningError> {
        if let Some(f) = &mut self.0 {
            let line = serde_json::to_string(rec).map_err(|e| CloningError::Io(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| CloningError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// Multi-speaker base training on `examples` (clean and noisy).
///
/// Feature statistics are taken from `examples` and stored in the model.
/// Writes `train_log.jsonl`, periodic and final checkpoints to `out_dir` when
/// given. On a non-finite loss the pre-step parameters are saved as
/// `last_good.ckpt` and training stops with an error.
pub fn train_base(
    mut model: AcousticModel,
    examples: &[Example],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, CloningError> {
    cfg.validate()?;
    if model.variant() != cfg.variant {
        return Err(CloningError::Config(format!(
            "train config is for {:?}, model is {:?}",
            cfg.variant,
            model.variant()
        )));
    }
    let speakers = speaker_index(examples);
    if model.variant() == Variant::Adaptation && model.n_speakers() != speakers.len() {
        return Err(CloningError::Config(format!(
            "model has {} speaker rows for {} training speakers",
            model.n_speakers(),
            speakers.len()
        )));
    }
    let (mean, std) = band_stats(examples)?;
    model.set_normalization(&mean, &std)?;
    let items = examples
        .iter()
        .map(|e| tf_item(&model, e, &speakers, None))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = frame_labels(&items);
    let class_weights = if cfg.balance_domain_classes {
        balanced_weights(&labels)
    } else {
        [1.0; 2]
    };
    let trainable: Vec<bool> = model.params.ids().map(|id| model.group(id) != Group::Buffer).collect();
    let mut adam = Adam::new(&model.params);
    let mut rng = seed::rng(cfg.seed, "batches");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut sink = LogSink::create(out_dir, TRAIN_LOG_FILE)?;
    let meta = |m: &AcousticModel, step: usize| serde_json::json!({"speakers": speakers, "train": cfg, "step": step, "n_mels": m.config.n_mels});
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let its: Vec<&TfItem> = batch.iter().map(|&i| &items[i]).collect();
        let labs: Vec<Vec<usize>> = batch.iter().map(|&i| labels[i].clone()).collect();
        let dseed = seed::derive(cfg.seed, &format!("dropout/{step}"));
        let result = batch_gradients(&model, &its, &labs, cfg.lambda, dseed, &trainable, true, class_weights).and_then(
            |(parts, mut grads)| {
                let norm = clip_global_norm(&mut grads, cfg.grad_clip);
                if parts.total.is_finite() && norm.is_finite() {
                    Ok((parts, grads, norm))
                } else {
                    Err(CloningError::Divergence {
                        step,
                        reason: format!("loss {} grad norm {norm}", parts.total),
                    })
                }
            },
        );
        let (parts, grads, grad_norm) = match result {
            Ok(r) => r,
            Err(e) => {
                let e = match e {
                    CloningError::Model(ModelError::Diff(DiffError::NonFinite(op))) => CloningError::Divergence {
                        step,
                        reason: format!("non-finite value in {op}"),
                    },
                    e => e,
                };
                if matches!(e, CloningError::Divergence { .. }) {
                    if let Some(dir) = out_dir {
                        save_model(&model, &dir.join("last_good.ckpt"), meta(&model, step))?;
                    }
                }
                return Err(e);
            }
        };
        let warm = if cfg.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        let lr = cfg.learning_rate * warm;
        adam.step(&mut model.params, &grads, lr, |id| trainable[id.index()])?;
        let rec = StepLog {
            step,
            loss: parts.total,
            l_rcon: parts.rcon,
            l_noise_ce: parts.ce,
            lambda: cfg.lambda,
            cls_accuracy: parts.accuracy,
            grad_norm,
            lr,
        };
        sink.write(&rec)?;
        log.push(rec);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_model(
                    &model,
                    &dir.join(format!("step_{:06}.ckpt", step + 1)),
                    meta(&model, step + 1),
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_model(&model, &dir.join("final.ckpt"), meta(&model, cfg.max_steps))?;
    }
    Ok(TrainOutcome { model, speakers, log })
}
