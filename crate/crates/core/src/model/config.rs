use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Speaker embedding table plus noise tag; `s` feeds pre-net and attention.
    Adaptation,
    /// External speaker vector; `s` feeds the pre-net GRU only, no tag.
    Encoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub d_emb: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub d_conv: usize,
    /// Output width of the bidirectional encoder GRU (both directions).
    pub d_enc: usize,
    pub prenet: Vec<usize>,
    pub dropout: f64,
    pub d_z: usize,
    pub n_mixtures: usize,
    pub sigma_min: f64,
    pub d_spk: usize,
    /// Speaker-table rows (adaptation variant). Not part of the architecture
    /// hash: few-shot adaptation appends a row.
    pub n_speakers: usize,
    /// Width of the external speaker vector (encoding variant).
    pub d_xvec: usize,
    pub d_tag: usize,
    pub d_dec: usize,
    pub d_cls: usize,
    pub recon_loss: ReconLoss,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(Variant::Adaptation)
    }
}

impl ModelConfig {
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            n_mels: 32,
            vocab_size: 10,
            max_tokens: 32,
            d_emb: 32,
            conv_layers: 2,
            conv_kernel: 3,
            d_conv: 48,
            d_enc: 48,
            prenet: vec![64, 64],
            dropout: 0.5,
            d_z: 64,
            n_mixtures: 2,
            sigma_min: 0.2,
            d_spk: 32,
            n_speakers: 8,
            d_xvec: 32,
            d_tag: 8,
            d_dec: 64,
            d_cls: 32,
            recon_loss: ReconLoss::L1,
        }
    }

    /// Full-size dimensions (256-wide GRUs); far too slow for the test suite.
    pub fn full_size(variant: Variant) -> Self {
        Self {
            n_mels: 80,
            max_tokens: 200,
            d_emb: 256,
            conv_layers: 3,
            conv_kernel: 5,
            d_conv: 256,
            d_enc: 256,
            prenet: vec![256, 128],
            d_z: 256,
            n_mixtures: 5,
            d_spk: 256,
            n_speakers: 100,
            d_xvec: 512,
            d_tag: 16,
            d_dec: 512,
            d_cls: 128,
            ..Self::toy(variant)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let dims = [
            self.n_mels,
            self.vocab_size,
            self.max_tokens,
            self.d_emb,
            self.conv_kernel,
            self.d_conv,
            self.d_z,
            self.n_mixtures,
            self.d_spk,
            self.d_dec,
            self.d_cls,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if self.d_enc < 2 || !self.d_enc.is_multiple_of(2) {
            return bad("d_enc must be even (two GRU directions)");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd to keep one row per token");
        }
        if self.prenet.is_empty() || self.prenet.contains(&0) {
            return bad("prenet needs at least one positive layer width");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min must be positive");
        }
        match self.variant {
            Variant::Adaptation if self.n_speakers == 0 || self.d_tag == 0 => {
                bad("adaptation variant needs speakers and a tag width")
            }
            Variant::Encoding if self.d_xvec == 0 => bad("encoding variant needs d_xvec"),
            _ => Ok(()),
        }
    }

    /// SHA-256 over the architecture (everything except `n_speakers`).
    pub fn arch_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.n_speakers = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}
