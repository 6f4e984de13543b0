use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS};
use crate::error::{LarlError, Result};
use crate::latent::LatentKind;
use crate::nn::CellKind;

/// How categorical latent embeddings reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `h_0 = Σ_m E_m(z_m)`.
    Summation,
    /// Summation for `h_0`, then per-step attention over the `E_m(z_m)`.
    Attention,
    /// Gaussian latents and word-level models.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mle,
    FullElbo,
    LiteElbo,
}

/// Context encoder layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Attention GRU per utterance, then a GRU over utterance encodings.
    Hierarchical,
    /// One attention GRU over the concatenated context.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    /// `None` gives a plain encoder-decoder acting in word space.
    pub latent: Option<LatentKind>,
    pub fusion: Fusion,
    pub objective: Objective,
    pub encoder: EncoderKind,
    pub decoder_cell: CellKind,
    pub embed_size: usize,
    pub utt_size: usize,
    pub ctx_size: usize,
    pub dec_size: usize,
    /// Number of latent variables (Gaussian dimension for Gaussian latents).
    pub m: usize,
    /// Classes per categorical variable.
    pub k: usize,
    /// Latent embedding width.
    pub d: usize,
    pub beta: f64,
    pub dropout: f64,
    /// Hierarchical contexts keep the first utterance and the most recent
    /// ones up to this many in total; 0 keeps all.
    pub max_context_turns: usize,
    /// Flat contexts keep this many trailing tokens; 0 keeps all.
    pub max_context_tokens: usize,
    pub init_range: f64,
}

impl ModelConfig {
    /// Negotiation defaults: hierarchical encoder and GRU decoder.
    pub fn negotiation(vocab_size: usize, latent: Option<LatentKind>, fusion: Fusion, objective: Objective) -> Self {
        let (m, k) = match latent {
            Some(LatentKind::Gaussian) => (200, 1),
            _ => (10, 20),
        };
        Self {
            vocab_size,
            bos_id: BOS,
            eos_id: EOS,
            latent,
            fusion,
            objective,
            encoder: EncoderKind::Hierarchical,
            decoder_cell: CellKind::Gru,
            embed_size: 256,
            utt_size: 128,
            ctx_size: 256,
            dec_size: 256,
            m,
            k,
            d: 256,
            beta: 0.01,
            dropout: 0.5,
            max_context_turns: 0,
            max_context_tokens: 0,
            init_range: 0.08,
        }
    }

    /// Slot-filling defaults: flat encoder and LSTM decoder.
    pub fn slotfill(vocab_size: usize, latent: Option<LatentKind>, fusion: Fusion, objective: Objective) -> Self {
        Self {
            encoder: EncoderKind::Flat,
            decoder_cell: CellKind::Lstm,
            ctx_size: 300,
            dec_size: 150,
            d: 150,
            ..Self::negotiation(vocab_size, latent, fusion, objective)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LarlError::Config(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocabulary needs at least 2 tokens, got {}", self.vocab_size));
        }
        if self.bos_id >= self.vocab_size || self.eos_id >= self.vocab_size {
            return bad("bos/eos ids must lie inside the vocabulary".into());
        }
        let sizes = [
            ("embed_size", self.embed_size),
            ("utt_size", self.utt_size),
            ("ctx_size", self.ctx_size),
            ("dec_size", self.dec_size),
            ("m", self.m),
            ("k", self.k),
            ("d", self.d),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.init_range > 0.0) {
            return bad("init_range must be positive".into());
        }
        match (self.latent, self.fusion) {
            (Some(LatentKind::Categorical), Fusion::Summation | Fusion::Attention) => {}
            (Some(LatentKind::Categorical), Fusion::None) => return bad("categorical latents need summation or attention fusion".into()),
            (_, Fusion::Attention) => return bad("attention fusion requires categorical latents".into()),
            (_, Fusion::Summation) => return bad("summation fusion requires categorical latents".into()),
            (_, Fusion::None) => {}
        }
        match (self.latent, self.objective) {
            (None, Objective::Mle) | (Some(_), Objective::FullElbo | Objective::LiteElbo) => Ok(()),
            (None, _) => bad("elbo objectives need a latent kind".into()),
            (Some(_), Objective::Mle) => bad("latent models train with full-elbo or lite-elbo".into()),
        }
    }

    /// Width of the vector the decoder's initial state is built from.
    pub(crate) fn init_width(&self) -> usize {
        match self.latent {
            None => self.ctx_size,
            Some(LatentKind::Gaussian) => self.m,
            Some(LatentKind::Categorical) => self.d,
        }
    }

    /// Width of the policy head's output.
    pub fn latent_params_width(&self) -> usize {
        match self.latent {
            None => 0,
            Some(LatentKind::Gaussian) => 2 * self.m,
            Some(LatentKind::Categorical) => self.m * self.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for (l, f, o) in [
            (None, Fusion::None, Objective::Mle),
            (Some(LatentKind::Gaussian), Fusion::None, Objective::FullElbo),
            (Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo),
            (Some(LatentKind::Categorical), Fusion::Attention, Objective::LiteElbo),
        ] {
            ModelConfig::negotiation(50, l, f, o).validate().unwrap();
            ModelConfig::slotfill(50, l, f, o).validate().unwrap();
        }
        let c = ModelConfig::negotiation(50, Some(LatentKind::Gaussian), Fusion::None, Objective::LiteElbo);
        assert_eq!((c.embed_size, c.utt_size, c.ctx_size, c.dec_size, c.m), (256, 128, 256, 256, 200));
        let c = ModelConfig::negotiation(50, Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo);
        assert_eq!((c.m, c.k, c.beta, c.dropout), (10, 20, 0.01, 0.5));
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let gauss_attn = ModelConfig::negotiation(50, Some(LatentKind::Gaussian), Fusion::Attention, Objective::LiteElbo);
        assert!(gauss_attn.validate().is_err());
        let word_elbo = ModelConfig::negotiation(50, None, Fusion::None, Objective::LiteElbo);
        assert!(word_elbo.validate().is_err());
        let mut beta = ModelConfig::negotiation(50, None, Fusion::None, Objective::Mle);
        beta.beta = 1.5;
        assert!(beta.validate().is_err());
        let cat_none = ModelConfig::negotiation(50, Some(LatentKind::Categorical), Fusion::None, Objective::FullElbo);
        assert!(cat_none.validate().is_err());
    }
}
