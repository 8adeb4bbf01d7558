//! Post-hoc noise probe on frozen latent frames.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloning::{normalized, Example};
use crate::diffcore::{Adam, ParamStore, Tape, Tensor};
use crate::model::{AcousticModel, Dropout, PaddedBatch, SpeakerInput, TfItem, Variant};
use crate::seed;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of utterance groups used for training the probe.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 40,
            batch: 128,
            lr: 3e-3,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Frame features with labels and the group (utterance pair) each frame
/// belongs to; groups never straddle the train/validation split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of frames labelled 1.
    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len().max(1) as f64
    }

    fn push_rows(&mut self, m: &Tensor, label: usize, group: usize) {
        for t in 0..m.rows() {
            self.features.push(m.row(t).to_vec());
            self.labels.push(label);
            self.groups.push(group);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub train_frames: usize,
    pub val_frames: usize,
}

/// Raw log-mel frames of `examples` labelled by condition. Utterances sharing
/// a parent (`{id}` and `{id}-n`, or triples `{id}.c` and `{id}.n`) form one
/// group.
pub fn mel_probe_data(examples: &[Example]) -> ProbeData {
    let mut d = ProbeData::default();
    for (e, g) in examples.iter().zip(groups_of(examples)) {
        d.push_rows(&e.mel, e.condition.index(), g);
    }
    d
}

/// Teacher-forced latent frames `z` of `examples` under `model`. The model is
/// only read. Speakers without a table row use the mean row.
pub fn latent_probe_data(
    model: &AcousticModel,
    examples: &[Example],
    speakers: &[String],
    dropout_seed: u64,
) -> Result<ProbeData, EvalError> {
    let mut d = ProbeData::default();
    for ((k, e), g) in examples.iter().enumerate().zip(groups_of(examples)) {
        let speaker = match model.variant() {
            Variant::Adaptation => match speakers.iter().position(|s| *s == e.speaker_id) {
                Some(i) => SpeakerInput::Table(i),
                None => SpeakerInput::Embedding(model.mean_speaker_row().expect("adaptation table")),
            },
            Variant::Encoding => SpeakerInput::Vector(
                e.xvec
                    .clone()
                    .ok_or_else(|| EvalError::Data(format!("{} has no speaker vector", e.utt_id)))?,
            ),
        };
        let item = TfItem {
            tokens: e.tokens.clone(),
            frames: normalized(model, &e.mel),
            speaker,
            tag: (model.variant() == Variant::Adaptation).then_some(e.condition),
        };
        let d_seed = seed::derive(dropout_seed, &format!("probe/{k}"));
        let out = model
            .teacher_forced_pass(&PaddedBatch::new(vec![item]), 0.0, Dropout::Seeded(d_seed))?
            .remove(0);
        d.push_rows(&out.z, e.condition.index(), g);
    }
    Ok(d)
}

fn groups_of(examples: &[Example]) -> Vec<usize> {
    let mut keys: Vec<String> = Vec::new();
    examples
        .iter()
        .map(|e| {
            let id = e.utt_id.as_str();
            let key = [".c", ".n", "-n"]
                .iter()
                .find_map(|s| id.strip_suffix(s))
                .unwrap_or(id)
                .to_string();
            match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            }
        })
        .collect()
}

/// Train a one-hidden-layer probe on part of the groups and report frame
/// accuracy on the rest. Labels must be balanced within 45/55.
pub fn probe_accuracy(data: &ProbeData, cfg: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Data("probe needs frames".into()));
    }
    let pos = data.positive_fraction();
    if !(0.45..=0.55).contains(&pos) {
        return Err(EvalError::Imbalance(pos));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.hidden == 0 || cfg.batch == 0 {
        return Err(EvalError::Config("invalid probe configuration".into()));
    }
    let n_groups = data.groups.iter().max().map_or(0, |g| g + 1);
    if n_groups < 2 {
        return Err(EvalError::Data("probe needs at least two utterance groups".into()));
    }
    let mut rng = seed::rng(cfg.seed, "probe-split");
    let mut gs: Vec<usize> = (0..n_groups).collect();
    gs.shuffle(&mut rng);
    let n_train = ((n_groups as f64 * cfg.train_fraction).round() as usize).clamp(1, n_groups - 1);
    let mut is_train = vec![false; n_groups];
    gs[..n_train].iter().for_each(|&g| is_train[g] = true);
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| is_train[data.groups[i]]);

    // Standardise with training statistics.
    let dim = data.features[0].len();
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in &tr {
        data.features[i]
            .iter()
            .zip(&mut mean)
            .for_each(|(v, m)| *m += v / tr.len() as f64);
    }
    for &i in &tr {
        data.features[i]
            .iter()
            .zip(&mean)
            .zip(&mut sd)
            .for_each(|((v, m), s)| *s += (v - m).powi(2) / tr.len() as f64);
    }
    let sd: Vec<f64> = sd.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let rows = |idx: &[usize]| -> Tensor {
        let data_rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| {
                data.features[i]
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean[j]) / sd[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(idx.len(), dim, data_rows).expect("rectangular features")
    };

    let mut params = ParamStore::new();
    let mut init = |name: &str, r: usize, c: usize| {
        let a = (6.0 / (r + c) as f64).sqrt();
        let v = (0..r * c).map(|_| rng.gen_range(-a..=a)).collect();
        params
            .add(name, Tensor::new(r, c, v).expect("shape"))
            .expect("unique name")
    };
    let w1 = init("w1", dim, cfg.hidden);
    let w2 = init("w2", cfg.hidden, 2);
    let b1 = params.add("b1", Tensor::zeros(1, cfg.hidden)).expect("unique");
    let b2 = params.add("b2", Tensor::zeros(1, 2)).expect("unique");
    let forward = |params: &ParamStore, tape: &mut Tape, x: Tensor, train: bool| {
        let b = params.bind(tape, |_| train).expect("bind");
        let x = tape.constant(x).expect("finite");
        let h = tape.matmul(x, b.var(w1)).expect("shape");
        let h = tape.add(h, b.var(b1)).expect("shape");
        let h = tape.relu(h).expect("finite");
        let o = tape.matmul(h, b.var(w2)).expect("shape");
        (tape.add(o, b.var(b2)).expect("shape"), b)
    };
    let mut adam = Adam::new(&params);
    let mut order = tr.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let (logits, b) = forward(&params, &mut tape, rows(chunk), true);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let mut g = tape.backward(loss)?;
            let grads = b.collect(&params, &mut g);
            adam.step(&mut params, &grads, cfg.lr, |_| true)?;
        }
    }
    let accuracy = |idx: &[usize]| -> f64 {
        let mut tape = Tape::new();
        let (logits, _) = forward(&params, &mut tape, rows(idx), false);
        let l = tape.value(logits);
        let correct = idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| usize::from(l.get(r, 1) > l.get(r, 0)) == data.labels[i])
            .count();
        correct as f64 / idx.len().max(1) as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&tr),
        accuracy: accuracy(&va),
        train_frames: tr.len(),
        val_frames: va.len(),
    })
}
