//! Small TDNN speaker encoder producing x-vector–style embeddings.
//!
//! Three dilated convolutions over mel frames, mean and standard-deviation
//! pooling, then a linear projection. The projection output (unit-normalised)
//! is the embedding; a classification head over training speakers is used only
//! for pretraining.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_global_norm, Adam, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdnnConfig {
    pub n_mels: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub d_emb: usize,
    pub n_speakers: usize,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        Self {
            n_mels: 32,
            width: 64,
            kernel: 5,
            dilations: vec![1, 2, 3],
            d_emb: 32,
            n_speakers: 8,
        }
    }
}

impl TdnnConfig {
    /// Frames consumed by the convolution stack.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub config: TdnnConfig,
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    proj: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdnnTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TdnnTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl SpeakerEncoder {
    pub fn new(config: TdnnConfig, seed_value: u64) -> Result<Self, ModelError> {
        if config.kernel == 0 || config.dilations.is_empty() || config.width == 0 || config.d_emb == 0 {
            return Err(ModelError::Config("TDNN dimensions must be positive".into()));
        }
        let mut rng = seed::rng(seed_value, "tdnn-init");
        let mut params = ParamStore::new();
        let mut dense = |name: &str, r: usize, c: usize| -> Result<(ParamId, ParamId), ModelError> {
            let a = (6.0 / (r + c) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.gen_range(-a..=a)).collect();
            let w = params.add(format!("{name}.w"), Tensor::new(r, c, data)?)?;
            Ok((w, params.add(format!("{name}.b"), Tensor::zeros(1, c))?))
        };
        let mut layers = Vec::new();
        let mut d_in = config.n_mels;
        for l in 0..config.dilations.len() {
            layers.push(dense(&format!("tdnn.l{l}"), config.kernel * d_in, config.width)?);
            d_in = config.width;
        }
        let proj = dense("tdnn.proj", 2 * config.width, config.d_emb)?;
        let head = dense("tdnn.head", config.d_emb, config.n_speakers.max(1))?;
        Ok(Self {
            config,
            params,
            layers,
            proj,
            head,
        })
    }

    /// Pooled projection for one utterance (`T × n_mels`, per-utterance mean
    /// removed) on `tape`.
    fn embed_var(&self, tape: &mut Tape, vars: &[Var], mel: &Tensor) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if mel.cols() != cfg.n_mels {
            return Err(ModelError::Shape(format!(
                "{} bands, encoder expects {}",
                mel.cols(),
                cfg.n_mels
            )));
        }
        if mel.rows() < cfg.receptive_field() {
            return Err(ModelError::TooShort(format!(
                "{} frames, speaker encoder needs at least {}",
                mel.rows(),
                cfg.receptive_field()
            )));
        }
        let v = |id: ParamId| vars[id.index()];
        let mut h = tape.constant(mean_removed(mel))?;
        for (&(w, b), &dil) in self.layers.iter().zip(&cfg.dilations) {
            let cols = tape.unfold(h, cfg.kernel, dil, 0)?;
            let lin = tape.matmul(cols, v(w))?;
            let lin = tape.add(lin, v(b))?;
            h = tape.relu(lin)?;
        }
        let mean = tape.mean_rows(h)?;
        let sq = tape.mul(h, h)?;
        let ex2 = tape.mean_rows(sq)?;
        let m2 = tape.mul(mean, mean)?;
        let var = tape.sub(ex2, m2)?;
        let var = tape.add_const(var, 1e-5)?;
        let std = tape.sqrt(var)?;
        let stats = tape.concat(&[mean, std])?;
        let p = tape.matmul(stats, v(self.proj.0))?;
        Ok(tape.add(p, v(self.proj.1))?)
    }

    /// Unit-norm embedding of one utterance.
    pub fn embed(&self, mel: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let e = self.embed_var(&mut tape, &vars, mel)?;
        Ok(unit(tape.value(e).data()))
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, ModelError> {
        self.params
            .ids()
            .map(|id| {
                let t = self.params.get(id).clone();
                Ok(if trainable { tape.leaf(t)? } else { tape.constant(t)? })
            })
            .collect()
    }

    fn logits(&self, tape: &mut Tape, vars: &[Var], mel: &Tensor) -> Result<Var, ModelError> {
        let e = self.embed_var(tape, vars, mel)?;
        let a = tape.relu(e)?;
        let l = tape.matmul(a, vars[self.head.0.index()])?;
        Ok(tape.add(l, vars[self.head.1.index()])?)
    }

    /// Pretrain on `(mel, speaker index)` pairs with speaker classification.
    /// Returns the mean loss of each step.
    pub fn pretrain(&mut self, data: &[(Tensor, usize)], cfg: &TdnnTrainConfig) -> Result<Vec<f64>, ModelError> {
        if data.is_empty() || cfg.batch == 0 {
            return Err(ModelError::Config(
                "speaker encoder pretraining needs data and batch >= 1".into(),
            ));
        }
        if let Some((_, s)) = data.iter().find(|(_, s)| *s >= self.config.n_speakers) {
            return Err(ModelError::Config(format!(
                "speaker label {s} >= {}",
                self.config.n_speakers
            )));
        }
        let mut rng = seed::rng(cfg.seed, "tdnn-train");
        let mut adam = Adam::new(&self.params);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut grads = self.params.zeros_like();
            let mut total = 0.0;
            for _ in 0..cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (mel, spk) = &data[order[cursor]];
                cursor += 1;
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, true)?;
                let l = self.logits(&mut tape, &vars, mel)?;
                let ce = tape.cross_entropy(l, &[*spk])?;
                total += tape.value(ce).item();
                let mut g = tape.backward(ce)?;
                for (acc, v) in grads.iter_mut().zip(&vars) {
                    let (r, c) = (acc.rows(), acc.cols());
                    acc.add_assign(&g.take_or_zeros(*v, r, c));
                }
            }
            grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / cfg.batch as f64));
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut self.params, &grads, cfg.lr, |_| true)?;
            losses.push(total / cfg.batch as f64);
        }
        Ok(losses)
    }

    /// Top-1 speaker accuracy of the pretraining head.
    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64, ModelError> {
        let mut correct = 0;
        for (mel, spk) in data {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false)?;
            let l = self.logits(&mut tape, &vars, mel)?;
            let row = tape.value(l).row(0);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            correct += usize::from(best == *spk);
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

fn mean_removed(mel: &Tensor) -> Tensor {
    let (t, c) = (mel.rows(), mel.cols());
    let mut mean = vec![0.0; c];
    for r in 0..t {
        mel.row(r).iter().zip(&mut mean).for_each(|(v, m)| *m += v / t as f64);
    }
    let data = (0..t)
        .flat_map(|r| mel.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    Tensor::new(t, c, data).expect("same shape")
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mel(rng: &mut ChaCha8Rng, t: usize, c: usize, shift: f64) -> Tensor {
        Tensor::new(
            t,
            c,
            (0..t * c)
                .map(|i| rng.gen_range(-1.0..1.0) + shift * ((i % c) as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn receptive_field_and_short_input() {
        let enc = SpeakerEncoder::new(TdnnConfig::default(), 0).unwrap();
        assert_eq!(enc.config.receptive_field(), 25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            enc.embed(&mel(&mut rng, 24, 32, 0.0)),
            Err(ModelError::TooShort(_))
        ));
        let e = enc.embed(&mel(&mut rng, 25, 32, 0.0)).unwrap();
        assert_eq!(e.len(), 32);
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_ignores_constant_band_offsets() {
        let enc = SpeakerEncoder::new(TdnnConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = mel(&mut rng, 40, 32, 0.0);
        let shifted = Tensor::new(40, 32, m.data().iter().map(|v| v + 3.0).collect()).unwrap();
        let (a, b) = (enc.embed(&m).unwrap(), enc.embed(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_check_small_encoder() {
        let cfg = TdnnConfig {
            n_mels: 3,
            width: 4,
            kernel: 3,
            dilations: vec![1, 2],
            d_emb: 3,
            n_speakers: 2,
        };
        let enc = SpeakerEncoder::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = mel(&mut rng, 9, 3, 0.0);
        let inputs: Vec<Tensor> = enc.params.iter().map(|(_, t)| t.clone()).collect();
        let r = gradient_check(
            |t, v| {
                let l = enc
                    .logits(t, v, &m)
                    .map_err(|e| crate::diffcore::DiffError::Config(e.to_string()))?;
                t.cross_entropy(l, &[1])
            },
            &inputs,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.per_input);
    }

    #[test]
    fn pretraining_separates_synthetic_speakers() {
        let cfg = TdnnConfig {
            n_speakers: 3,
            ..Default::default()
        };
        let mut enc = SpeakerEncoder::new(cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<(Tensor, usize)> = (0..18)
            .map(|i| (mel(&mut rng, 30, 32, (i % 3) as f64), i % 3))
            .collect();
        let losses = enc
            .pretrain(
                &data,
                &TdnnTrainConfig {
                    steps: 60,
                    batch: 6,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
        assert!(enc.accuracy(&data).unwrap() > 0.9);
    }
}
