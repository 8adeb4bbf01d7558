//! The sequence-to-sequence acoustic model: text encoder, pre-net with latent
//! GRU, GMM attention, decoder GRU, and the frame-level domain classifier.
//!
//! Under teacher forcing only the two GRU recurrences are sequential. Pre-net,
//! attention parameters, contexts and output projections are computed for all
//! frames at once; means come from a running sum of the per-frame offsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Condition;
use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;
use crate::signal::{AnalysisConfig, MelSpectrogram};

use super::config::{ModelConfig, Variant};
use super::ModelError;

/// Conditioning for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerInput {
    /// Row of the speaker table (adaptation variant).
    Table(usize),
    /// Row vector used in place of a table row (adaptation variant), e.g. the
    /// mean row for speakers the table has never seen.
    Embedding(Vec<f64>),
    /// External speaker vector fed through the projection (encoding variant).
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Masks are a pure function of `(seed, layer, frame)`, so teacher-forced
    /// and free-running passes given the same seed drop the same units.
    Seeded(u64),
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    TextEncoder,
    Prenet,
    Attention,
    Decoder,
    Classifier,
    SpeakerTable,
    TagTable,
    SpeakerProjection,
    /// Feature normalisation statistics; never trained.
    Buffer,
}

pub fn group_of(name: &str) -> Group {
    match name.split('.').next().unwrap_or_default() {
        "enc" => Group::TextEncoder,
        "pre" | "lat" => Group::Prenet,
        "att" => Group::Attention,
        "dec" | "out" => Group::Decoder,
        "cls" => Group::Classifier,
        "spk" if name == "spk.table" => Group::SpeakerTable,
        "spk" => Group::SpeakerProjection,
        "tag" => Group::TagTable,
        _ => Group::Buffer,
    }
}

#[derive(Debug, Clone)]
struct Ids {
    emb: ParamId,
    conv: Vec<(ParamId, ParamId)>,
    enc_fwd: [ParamId; 4],
    enc_bwd: [ParamId; 4],
    pre: Vec<(ParamId, ParamId)>,
    lat_wx: ParamId,
    lat_ws: ParamId,
    lat: [ParamId; 3],
    att_wz: ParamId,
    att_ws: Option<ParamId>,
    att_b: ParamId,
    dec_wz: ParamId,
    dec_wc: ParamId,
    dec_wt: Option<ParamId>,
    dec: [ParamId; 3],
    out_wh: ParamId,
    out_wc: ParamId,
    out_b: ParamId,
    cls: [ParamId; 4],
    spk_table: Option<ParamId>,
    tag_table: Option<ParamId>,
    spk_proj: Option<(ParamId, ParamId)>,
    norm_mean: ParamId,
    norm_std: ParamId,
}

/// Name and shape of every parameter for `cfg`, in store order.
fn layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let mut v: Vec<(String, [usize; 2])> = Vec::new();
    let mut p = |n: &str, r: usize, c: usize| v.push((n.to_string(), [r, c]));
    let (h_enc, k) = (cfg.d_enc / 2, cfg.conv_kernel);
    p("enc.embedding", cfg.vocab_size, cfg.d_emb);
    let mut d_in = cfg.d_emb;
    for l in 0..cfg.conv_layers {
        p(&format!("enc.conv{l}.w"), k * d_in, cfg.d_conv);
        p(&format!("enc.conv{l}.b"), 1, cfg.d_conv);
        d_in = cfg.d_conv;
    }
    for dir in ["fwd", "bwd"] {
        p(&format!("enc.gru_{dir}.w_ih"), d_in, 3 * h_enc);
        p(&format!("enc.gru_{dir}.w_hh"), h_enc, 3 * h_enc);
        p(&format!("enc.gru_{dir}.b_ih"), 1, 3 * h_enc);
        p(&format!("enc.gru_{dir}.b_hh"), 1, 3 * h_enc);
    }
    let mut d_in = cfg.n_mels;
    for (l, &w) in cfg.prenet.iter().enumerate() {
        p(&format!("pre.fc{l}.w"), d_in, w);
        p(&format!("pre.fc{l}.b"), 1, w);
        d_in = w;
    }
    let (dz, k3) = (cfg.d_z, 3 * cfg.n_mixtures);
    p("lat.w_ix", d_in, 3 * dz);
    p("lat.w_is", cfg.d_spk, 3 * dz);
    p("lat.b_ih", 1, 3 * dz);
    p("lat.w_hh", dz, 3 * dz);
    p("lat.b_hh", 1, 3 * dz);
    p("att.w_z", dz, k3);
    if cfg.variant == Variant::Adaptation {
        p("att.w_s", cfg.d_spk, k3);
    }
    p("att.b", 1, k3);
    let dd = cfg.d_dec;
    p("dec.w_iz", dz, 3 * dd);
    p("dec.w_ic", cfg.d_enc, 3 * dd);
    if cfg.variant == Variant::Adaptation {
        p("dec.w_it", cfg.d_tag, 3 * dd);
    }
    p("dec.b_ih", 1, 3 * dd);
    p("dec.w_hh", dd, 3 * dd);
    p("dec.b_hh", 1, 3 * dd);
    p("out.w_h", dd, cfg.n_mels);
    p("out.w_c", cfg.d_enc, cfg.n_mels);
    p("out.b", 1, cfg.n_mels);
    p("cls.w1", dz, cfg.d_cls);
    p("cls.b1", 1, cfg.d_cls);
    p("cls.w2", cfg.d_cls, 2);
    p("cls.b2", 1, 2);
    match cfg.variant {
        Variant::Adaptation => {
            p("spk.table", cfg.n_speakers, cfg.d_spk);
            p("tag.table", 2, cfg.d_tag);
        }
        Variant::Encoding => {
            p("spk.proj.w", cfg.d_xvec, cfg.d_spk);
            p("spk.proj.b", 1, cfg.d_spk);
        }
    }
    p("norm.mean", 1, cfg.n_mels);
    p("norm.std", 1, cfg.n_mels);
    v
}

/// Initial value for a parameter given its name and shape.
fn init_value(name: &str, [r, c]: [usize; 2], cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let uniform = |rng: &mut ChaCha8Rng, a: f64| -> Tensor {
        let data = (0..r * c).map(|_| rng.gen_range(-a..=a)).collect();
        Tensor::new(r, c, data).expect("shape matches data")
    };
    let xavier = (6.0 / (r + c) as f64).sqrt();
    match name {
        "norm.std" => Tensor::filled(1, c, 1.0),
        "att.b" => {
            // Start with means advancing about a tenth of a token per frame and
            // unit-ish widths.
            let k = cfg.n_mixtures;
            let mut d = vec![0.0; 3 * k];
            d[k..2 * k].iter_mut().for_each(|v| *v = -2.25);
            d[2 * k..].iter_mut().for_each(|v| *v = 0.5);
            Tensor::row_vector(d)
        }
        "cls.w2" => uniform(rng, 0.01),
        "spk.table" | "tag.table" | "enc.embedding" => {
            let n = Normal::new(0.0, 0.3).expect("valid sigma");
            Tensor::new(r, c, (0..r * c).map(|_| n.sample(rng)).collect()).expect("shape matches data")
        }
        n if n.ends_with(".b")
            || n.contains(".b_")
            || n.ends_with(".mean")
            || n.ends_with("b1")
            || n.ends_with("b2") =>
        {
            Tensor::zeros(r, c)
        }
        _ => uniform(rng, xavier),
    }
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Graph handles produced by one teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct TfVars {
    /// `T × n_mels` next-frame predictions (normalised feature space).
    pub pred: Var,
    /// `T × d_z` latent GRU outputs.
    pub z: Var,
    /// `T × 2` domain logits on `grl(z, λ)`.
    pub logits: Var,
    /// `T × N` attention weights.
    pub alpha: Var,
    /// `T × K` mixture means.
    pub mu: Var,
}

/// One teacher-forced example: frames are in normalised feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct TfItem {
    pub tokens: Vec<usize>,
    pub frames: Tensor,
    pub speaker: SpeakerInput,
    pub tag: Option<Condition>,
}

/// Items padded to a common frame count; `lengths` marks the valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub items: Vec<TfItem>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(items: Vec<TfItem>) -> Self {
        let lengths: Vec<usize> = items.iter().map(|i| i.frames.rows()).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let items = items
            .into_iter()
            .map(|mut it| {
                let c = it.frames.cols();
                let mut data = it.frames.into_data();
                data.resize(t_max * c, 0.0);
                it.frames = Tensor::new(t_max, c, data).expect("padded shape");
                it
            })
            .collect();
        Self { items, lengths }
    }

    pub fn total_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Item `i` with padding rows removed.
    pub fn unpadded(&self, i: usize) -> TfItem {
        let it = &self.items[i];
        let c = it.frames.cols();
        let data = it.frames.data()[..self.lengths[i] * c].to_vec();
        TfItem {
            frames: Tensor::new(self.lengths[i], c, data).expect("valid rows"),
            ..it.clone()
        }
    }
}

/// Values of one teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TfOutput {
    pub pred: Tensor,
    pub z: Tensor,
    pub logits: Tensor,
    pub alpha: Tensor,
    pub mu: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    /// Denormalised log-mel frames.
    pub mel: MelSpectrogram,
    /// Normalised frames as produced by the decoder.
    pub frames: Tensor,
    pub z: Tensor,
    pub mu: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    /// True when generation ran out of frames before attention passed the text.
    pub budget_exhausted: bool,
}

/// Forward-pass context: the tape plus bound parameter handles.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    model: &'a AcousticModel,
}

impl<'a> Fwd<'a> {
    pub fn new(model: &'a AcousticModel, tape: &'a mut Tape, bound: &'a Bound) -> Self {
        Self { tape, bound, model }
    }

    fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let xw = self.tape.matmul(x, self.p(w))?;
        Ok(self.tape.add(xw, self.p(b))?)
    }

    fn dropout(&mut self, x: Var, layer: usize, first_frame: usize, d: Dropout) -> Result<Var, ModelError> {
        let Dropout::Seeded(s) = d else { return Ok(x) };
        let p = self.model.config.dropout;
        if p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = {
            let v = self.tape.value(x);
            (v.rows(), v.cols())
        };
        let keep = 1.0 / (1.0 - p);
        let mut mask = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(s, &format!("drop/{layer}/{}", first_frame + r)));
            mask.extend((0..cols).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }));
        }
        Ok(self.tape.mul_const(x, mask)?)
    }

    /// `N × d_enc`, one contextual row per token.
    pub fn encode_text(&mut self, tokens: &[usize]) -> Result<Var, ModelError> {
        let m = self.model;
        m.check_tokens(tokens)?;
        let mut h = self.tape.embedding_lookup(self.p(m.ids.emb), tokens)?;
        let k = m.config.conv_kernel;
        for &(w, b) in &m.ids.conv {
            let cols = self.tape.unfold(h, k, 1, k / 2)?;
            let lin = self.linear(cols, w, b)?;
            h = self.tape.relu(lin)?;
        }
        let n = tokens.len();
        let fwd = self.gru_over(h, m.ids.enc_fwd, n, false)?;
        let bwd = self.gru_over(h, m.ids.enc_bwd, n, true)?;
        Ok(self.tape.concat(&[fwd, bwd])?)
    }

    /// Run a GRU over the rows of `x`; output rows align with input rows.
    fn gru_over(&mut self, x: Var, ids: [ParamId; 4], n: usize, reverse: bool) -> Result<Var, ModelError> {
        let [w_ih, w_hh, b_ih, b_hh] = ids;
        let gi = self.linear(x, w_ih, b_ih)?;
        let dh = self.tape.value(self.p(w_hh)).rows();
        let mut h = self.tape.constant(Tensor::zeros(1, dh))?;
        let mut outs = vec![h; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let g = self.tape.slice_rows(gi, t, 1)?;
            h = self.tape.gru_step(g, h, self.p(w_hh), self.p(b_hh))?;
            outs[t] = h;
        }
        Ok(self.tape.stack_rows(&outs)?)
    }

    /// `1 × d_spk` conditioning vector.
    pub fn speaker(&mut self, s: &SpeakerInput) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        match (cfg.variant, s) {
            (Variant::Adaptation, SpeakerInput::Table(i)) => {
                let table = self.p(self.model.ids.spk_table.expect("adaptation table"));
                let rows = self.tape.value(table).rows();
                if *i >= rows {
                    return Err(ModelError::Config(format!("speaker index {i} outside table of {rows}")));
                }
                Ok(self.tape.embedding_lookup(table, &[*i])?)
            }
            (Variant::Adaptation, SpeakerInput::Embedding(v)) => {
                if v.len() != cfg.d_spk {
                    return Err(ModelError::Shape(format!(
                        "speaker embedding {} != d_spk {}",
                        v.len(),
                        cfg.d_spk
                    )));
                }
                Ok(self.tape.constant(Tensor::row_vector(v.clone()))?)
            }
            (Variant::Encoding, SpeakerInput::Vector(v)) => {
                if v.len() != cfg.d_xvec {
                    return Err(ModelError::Shape(format!(
                        "speaker vector {} != d_xvec {}",
                        v.len(),
                        cfg.d_xvec
                    )));
                }
                let (w, b) = self.model.ids.spk_proj.expect("encoding projection");
                let x = self.tape.constant(Tensor::row_vector(v.clone()))?;
                let lin = self.linear(x, w, b)?;
                Ok(self.tape.tanh(lin)?)
            }
            (v, s) => Err(ModelError::Config(format!("{s:?} does not fit the {v:?} variant"))),
        }
    }

    fn tag_row(&mut self, tag: Option<Condition>) -> Result<Option<Var>, ModelError> {
        match (self.model.ids.tag_table, tag) {
            (Some(table), Some(t)) => Ok(Some(self.tape.embedding_lookup(self.p(table), &[t.index()])?)),
            (Some(_), None) => Err(ModelError::Config("adaptation variant needs a noise tag".into())),
            (None, Some(_)) => Err(ModelError::Config("encoding variant has no noise tag".into())),
            (None, None) => Ok(None),
        }
    }

    fn prenet(&mut self, x: Var, first_frame: usize, d: Dropout) -> Result<Var, ModelError> {
        let mut h = x;
        for (l, &(w, b)) in self.model.ids.pre.clone().iter().enumerate() {
            let lin = self.linear(h, w, b)?;
            let act = self.tape.relu(lin)?;
            h = self.dropout(act, l, first_frame, d)?;
        }
        Ok(h)
    }

    /// Per-utterance terms added to the latent GRU input, attention and
    /// decoder input projections.
    fn conditioning(&mut self, s: Var, tag: Option<Var>) -> Result<(Var, Option<Var>, Option<Var>), ModelError> {
        let ids = &self.model.ids;
        let (lat_ws, att_ws, dec_wt) = (ids.lat_ws, ids.att_ws, ids.dec_wt);
        let lat = self.tape.matmul(s, self.p(lat_ws))?;
        let att = match att_ws {
            Some(w) => Some(self.tape.matmul(s, self.p(w))?),
            None => None,
        };
        let dec = match (dec_wt, tag) {
            (Some(w), Some(t)) => Some(self.tape.matmul(t, self.p(w))?),
            _ => None,
        };
        Ok((lat, att, dec))
    }

    /// Attention parameters `(logits, Δ, σ)` for every row of `z`.
    fn attention_params(&mut self, z: Var, att_s: Option<Var>) -> Result<(Var, Var, Var), ModelError> {
        let k = self.model.config.n_mixtures;
        let mut a = self.linear(z, self.model.ids.att_wz, self.model.ids.att_b)?;
        if let Some(s) = att_s {
            a = self.tape.add(a, s)?;
        }
        let logits = self.tape.slice(a, 0, k)?;
        let d_raw = self.tape.slice(a, k, k)?;
        let delta = self.tape.softplus(d_raw)?;
        let s_raw = self.tape.slice(a, 2 * k, k)?;
        let sp = self.tape.softplus(s_raw)?;
        let sigma = self.tape.add_const(sp, self.model.config.sigma_min)?;
        Ok((logits, delta, sigma))
    }

    fn decoder_gates(&mut self, z: Var, c: Var, tag_dec: Option<Var>) -> Result<Var, ModelError> {
        let ids = &self.model.ids;
        let (wz, wc, b) = (ids.dec_wz, ids.dec_wc, ids.dec[0]);
        let zi = self.tape.matmul(z, self.p(wz))?;
        let ci = self.tape.matmul(c, self.p(wc))?;
        let s = self.tape.add(zi, ci)?;
        let mut gi = self.tape.add(s, self.p(b))?;
        if let Some(t) = tag_dec {
            gi = self.tape.add(gi, t)?;
        }
        Ok(gi)
    }

    fn output(&mut self, h: Var, c: Var) -> Result<Var, ModelError> {
        let ids = &self.model.ids;
        let (wh, wc, b) = (ids.out_wh, ids.out_wc, ids.out_b);
        let hy = self.tape.matmul(h, self.p(wh))?;
        let cy = self.tape.matmul(c, self.p(wc))?;
        let s = self.tape.add(hy, cy)?;
        Ok(self.tape.add(s, self.p(b))?)
    }

    /// Domain logits for `z` through a gradient reversal of strength `lambda`.
    pub fn domain_classify(&mut self, z: Var, lambda: f64) -> Result<Var, ModelError> {
        let g = self.tape.grl(z, lambda)?;
        self.classifier_head(g)
    }

    /// The classifier MLP without the reversal in front.
    pub fn classifier_head(&mut self, x: Var) -> Result<Var, ModelError> {
        let [w1, b1, w2, b2] = self.model.ids.cls;
        let h = self.linear(x, w1, b1)?;
        let a = self.tape.relu(h)?;
        self.linear(a, w2, b2)
    }

    /// Full teacher forcing: frame `t` sees ground truth `m_{t−1}` (zeros for
    /// the first frame) and predicts `m_t`.
    pub fn teacher_forced(&mut self, item: &TfItem, lambda: f64, d: Dropout) -> Result<TfVars, ModelError> {
        let cfg = &self.model.config;
        let (t_len, n_mels) = (item.frames.rows(), item.frames.cols());
        if n_mels != cfg.n_mels || t_len == 0 {
            return Err(ModelError::Shape(format!(
                "frames {:?} do not match n_mels {}",
                item.frames.shape(),
                cfg.n_mels
            )));
        }
        let x_enc = self.encode_text(&item.tokens)?;
        let s = self.speaker(&item.speaker)?;
        let tag = self.tag_row(item.tag)?;
        let (lat_s, att_s, tag_dec) = self.conditioning(s, tag)?;

        let mut shifted = vec![0.0; t_len * n_mels];
        shifted[n_mels..].copy_from_slice(&item.frames.data()[..(t_len - 1) * n_mels]);
        let x_in = self.tape.constant(Tensor::new(t_len, n_mels, shifted)?)?;
        let pre = self.prenet(x_in, 0, d)?;
        let ids = self.model.ids.clone();
        let gx = self.linear(pre, ids.lat_wx, ids.lat[0])?;
        let gi_lat = self.tape.add(gx, lat_s)?;
        let z = self.recur(gi_lat, ids.lat[1], ids.lat[2], t_len)?;

        let (logits_w, delta, sigma) = self.attention_params(z, att_s)?;
        let mu = self.tape.cumsum_rows(delta)?;
        let alpha = self.tape.gmm_weights(logits_w, mu, sigma, item.tokens.len())?;
        let c = self.tape.matmul(alpha, x_enc)?;

        let gi_dec = self.decoder_gates(z, c, tag_dec)?;
        let h_dec = self.recur(gi_dec, ids.dec[1], ids.dec[2], t_len)?;
        let pred = self.output(h_dec, c)?;
        let logits = self.domain_classify(z, lambda)?;
        Ok(TfVars {
            pred,
            z,
            logits,
            alpha,
            mu,
        })
    }

    fn recur(&mut self, gi: Var, w_hh: ParamId, b_hh: ParamId, t_len: usize) -> Result<Var, ModelError> {
        let dh = self.tape.value(self.p(w_hh)).rows();
        let mut h = self.tape.constant(Tensor::zeros(1, dh))?;
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let g = self.tape.slice_rows(gi, t, 1)?;
            h = self.tape.gru_step(g, h, self.p(w_hh), self.p(b_hh))?;
            outs.push(h);
        }
        Ok(self.tape.stack_rows(&outs)?)
    }
}

impl AcousticModel {
    pub fn new(config: ModelConfig, seed_value: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed_value, "acoustic-init");
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let v = init_value(&name, shape, &config, &mut rng);
            params.add(name, v)?;
        }
        Self::from_parts(config, params)
    }

    /// Wrap an existing store, checking that names and shapes match `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in &want {
            let id = params.require(name)?;
            if params.get(id).shape() != *shape {
                return Err(ModelError::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.require(n).expect("checked above");
        let opt = |n: &str| params.id(n);
        let gru = |p: &str| {
            [
                id(&format!("{p}.w_ih")),
                id(&format!("{p}.w_hh")),
                id(&format!("{p}.b_ih")),
                id(&format!("{p}.b_hh")),
            ]
        };
        let ids = Ids {
            emb: id("enc.embedding"),
            conv: (0..config.conv_layers)
                .map(|l| (id(&format!("enc.conv{l}.w")), id(&format!("enc.conv{l}.b"))))
                .collect(),
            enc_fwd: gru("enc.gru_fwd"),
            enc_bwd: gru("enc.gru_bwd"),
            pre: (0..config.prenet.len())
                .map(|l| (id(&format!("pre.fc{l}.w")), id(&format!("pre.fc{l}.b"))))
                .collect(),
            lat_wx: id("lat.w_ix"),
            lat_ws: id("lat.w_is"),
            lat: [id("lat.b_ih"), id("lat.w_hh"), id("lat.b_hh")],
            att_wz: id("att.w_z"),
            att_ws: opt("att.w_s"),
            att_b: id("att.b"),
            dec_wz: id("dec.w_iz"),
            dec_wc: id("dec.w_ic"),
            dec_wt: opt("dec.w_it"),
            dec: [id("dec.b_ih"), id("dec.w_hh"), id("dec.b_hh")],
            out_wh: id("out.w_h"),
            out_wc: id("out.w_c"),
            out_b: id("out.b"),
            cls: [id("cls.w1"), id("cls.b1"), id("cls.w2"), id("cls.b2")],
            spk_table: opt("spk.table"),
            tag_table: opt("tag.table"),
            spk_proj: opt("spk.proj.w").map(|w| (w, id("spk.proj.b"))),
            norm_mean: id("norm.mean"),
            norm_std: id("norm.std"),
        };
        Ok(Self { config, params, ids })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn group(&self, id: ParamId) -> Group {
        group_of(self.params.name(id))
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_tokens {
            return Err(ModelError::Config(format!(
                "{} tokens exceed max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Config(format!(
                "token {t} outside vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.ids.spk_table.map_or(0, |id| self.params.get(id).rows())
    }

    pub fn speaker_table(&self) -> Option<&Tensor> {
        self.ids.spk_table.map(|id| self.params.get(id))
    }

    /// Append a speaker row initialised from `init`; returns its index.
    pub fn add_speaker(&mut self, init: &[f64]) -> Result<usize, ModelError> {
        let id = self
            .ids
            .spk_table
            .ok_or_else(|| ModelError::Config("encoding variant has no speaker table".into()))?;
        let t = self.params.get(id);
        if init.len() != t.cols() {
            return Err(ModelError::Shape(format!(
                "row of {} for table width {}",
                init.len(),
                t.cols()
            )));
        }
        let mut data = t.data().to_vec();
        data.extend_from_slice(init);
        let rows = t.rows() + 1;
        self.params.replace(id, Tensor::new(rows, init.len(), data)?);
        self.config.n_speakers = rows;
        Ok(rows - 1)
    }

    /// Set per-band normalisation statistics.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<(), ModelError> {
        let n = self.config.n_mels;
        if mean.len() != n || std.len() != n || std.iter().any(|&s| !(s > 0.0)) {
            return Err(ModelError::Config(
                "normalisation needs n_mels means and positive stds".into(),
            ));
        }
        self.params.set(self.ids.norm_mean, Tensor::row_vector(mean.to_vec()))?;
        self.params.set(self.ids.norm_std, Tensor::row_vector(std.to_vec()))?;
        Ok(())
    }

    pub fn normalize(&self, mel: &MelSpectrogram) -> Result<Tensor, ModelError> {
        if mel.n_mels != self.config.n_mels {
            return Err(ModelError::Shape(format!(
                "mel has {} bands, model {}",
                mel.n_mels, self.config.n_mels
            )));
        }
        let (m, s) = (self.params.get(self.ids.norm_mean), self.params.get(self.ids.norm_std));
        let data = mel
            .frames
            .iter()
            .flat_map(|f| f.iter().enumerate().map(|(j, v)| (v - m.data()[j]) / s.data()[j]))
            .collect();
        Ok(Tensor::new(mel.frames.len(), mel.n_mels, data)?)
    }

    pub fn denormalize(&self, frames: &Tensor, analysis: &AnalysisConfig) -> Result<MelSpectrogram, ModelError> {
        let (m, s) = (self.params.get(self.ids.norm_mean), self.params.get(self.ids.norm_std));
        let rows = (0..frames.rows())
            .map(|t| {
                frames
                    .row(t)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * s.data()[j] + m.data()[j])
                    .collect()
            })
            .collect();
        Ok(MelSpectrogram::new(rows, analysis)?)
    }

    /// Conditioning vector `s` the model derives from `speaker`.
    pub fn speaker_vector(&self, speaker: &SpeakerInput) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let mut f = Fwd::new(self, &mut tape, &bound);
        let v = f.speaker(speaker)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Frame-wise domain decisions of the noise classifier on latent frames.
    pub fn classify_domain(&self, z: &Tensor) -> Result<Vec<Condition>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let mut f = Fwd::new(self, &mut tape, &bound);
        let x = f.tape.constant(z.clone())?;
        let logits = f.classifier_head(x)?;
        let l = tape.value(logits);
        Ok((0..l.rows())
            .map(|t| {
                if l.get(t, 1) > l.get(t, 0) {
                    Condition::Noisy
                } else {
                    Condition::Clean
                }
            })
            .collect())
    }

    /// Mean of the speaker-table rows, for speakers the table does not know.
    pub fn mean_speaker_row(&self) -> Option<Vec<f64>> {
        let t = self.speaker_table()?;
        let mut m = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            m.iter_mut().zip(t.row(r)).for_each(|(a, v)| *a += v / t.rows() as f64);
        }
        Some(m)
    }

    /// Teacher-forced outputs for every item of a padded batch. Padding rows
    /// never enter the computation.
    pub fn teacher_forced_pass(
        &self,
        batch: &PaddedBatch,
        lambda: f64,
        d: Dropout,
    ) -> Result<Vec<TfOutput>, ModelError> {
        (0..batch.items.len())
            .map(|i| {
                let item = batch.unpadded(i);
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, |_| false)?;
                let mut f = Fwd::new(self, &mut tape, &bound);
                let v = f.teacher_forced(&item, lambda, d)?;
                Ok(TfOutput {
                    pred: tape.value(v.pred).clone(),
                    z: tape.value(v.z).clone(),
                    logits: tape.value(v.logits).clone(),
                    alpha: tape.value(v.alpha).clone(),
                    mu: tape.value(v.mu).clone(),
                })
            })
            .collect()
    }

    /// Free-running generation: each predicted frame is the next input. Stops
    /// once every mixture mean is past `N + 0.5`, or after `max_frames`.
    pub fn synthesize(
        &self,
        tokens: &[usize],
        speaker: &SpeakerInput,
        tag: Option<Condition>,
        max_frames: usize,
        d: Dropout,
        analysis: &AnalysisConfig,
    ) -> Result<Synthesis, ModelError> {
        if max_frames == 0 {
            return Err(ModelError::Budget("invalid budget: max_frames must be >= 1".into()));
        }
        let cfg = &self.config;
        let n = tokens.len();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false)?;
        let mut f = Fwd::new(self, &mut tape, &bound);
        let x_enc = f.encode_text(tokens)?;
        let s = f.speaker(speaker)?;
        let tag = f.tag_row(tag)?;
        let (lat_s, att_s, tag_dec) = f.conditioning(s, tag)?;
        let ids = self.ids.clone();
        let mut prev = f.tape.constant(Tensor::zeros(1, cfg.n_mels))?;
        let mut h_lat = f.tape.constant(Tensor::zeros(1, cfg.d_z))?;
        let mut h_dec = f.tape.constant(Tensor::zeros(1, cfg.d_dec))?;
        let mut mu = f.tape.constant(Tensor::zeros(1, cfg.n_mixtures))?;
        let (mut frames, mut zs, mut mus, mut alphas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut exhausted = true;
        for t in 0..max_frames {
            let pre = f.prenet(prev, t, d)?;
            let gx = f.linear(pre, ids.lat_wx, ids.lat[0])?;
            let gi = f.tape.add(gx, lat_s)?;
            h_lat = f.tape.gru_step(gi, h_lat, f.p(ids.lat[1]), f.p(ids.lat[2]))?;
            let (logits_w, delta, sigma) = f.attention_params(h_lat, att_s)?;
            mu = f.tape.add(mu, delta)?;
            let alpha = f.tape.gmm_weights(logits_w, mu, sigma, n)?;
            let c = f.tape.matmul(alpha, x_enc)?;
            let gi_d = f.decoder_gates(h_lat, c, tag_dec)?;
            h_dec = f.tape.gru_step(gi_d, h_dec, f.p(ids.dec[1]), f.p(ids.dec[2]))?;
            let y = f.output(h_dec, c)?;
            frames.extend_from_slice(f.tape.value(y).data());
            zs.extend_from_slice(f.tape.value(h_lat).data());
            let mu_v = f.tape.value(mu).data().to_vec();
            alphas.push(f.tape.value(alpha).data().to_vec());
            let done = mu_v.iter().all(|&m| m > n as f64 + 0.5);
            mus.push(mu_v);
            prev = y;
            if done {
                exhausted = false;
                break;
            }
        }
        let t_len = mus.len();
        let frames = Tensor::new(t_len, cfg.n_mels, frames)?;
        Ok(Synthesis {
            mel: self.denormalize(&frames, analysis)?,
            frames,
            z: Tensor::new(t_len, cfg.d_z, zs)?,
            mu: mus,
            alpha: alphas,
            budget_exhausted: exhausted,
        })
    }
}
