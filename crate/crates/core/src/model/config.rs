use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::ModelDims;

pub type Token = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Dimension of one input frame.
    pub d_in: usize,
    /// Longest accepted frame sequence.
    pub max_frames: usize,
    /// Longest text (excluding the end token) the decoder has positions for.
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub n_language_tokens: usize,
}

/// Fixed token layout: `SOT, EOT, TASK, LANG(0..n)`, then text tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub sot: Token,
    pub eot: Token,
    pub task: Token,
    pub lang_start: Token,
    pub n_lang: usize,
}

impl SpecialTokens {
    pub fn lang(&self, k: usize) -> Option<Token> {
        (k < self.n_lang).then(|| self.lang_start + k as Token)
    }

    pub fn text_start(&self) -> Token {
        self.lang_start + self.n_lang as Token
    }
}

pub const PROMPT_LEN: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_in: 16,
            max_frames: 64,
            max_text_len: 16,
            vocab_size: 128,
            n_language_tokens: 8,
        }
    }
}

impl ModelConfig {
    pub fn special(&self) -> SpecialTokens {
        SpecialTokens { sot: 0, eot: 1, task: 2, lang_start: 3, n_lang: self.n_language_tokens }
    }

    pub fn lang_token(&self, k: usize) -> Result<Token> {
        self.special()
            .lang(k)
            .ok_or_else(|| Error::Contract(format!("language index {k} has no token (n_language_tokens = {})", self.n_language_tokens)))
    }

    pub fn prompt(&self, k: usize) -> Result<[Token; PROMPT_LEN]> {
        let sp = self.special();
        Ok([sp.sot, self.lang_token(k)?, sp.task])
    }

    pub fn max_positions(&self) -> usize {
        PROMPT_LEN + self.max_text_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.ffn_dim == 0 || self.d_in == 0 || self.max_frames == 0 || self.max_text_len == 0 {
            return bad("ffn_dim, d_in, max_frames and max_text_len must be positive".into());
        }
        let specials = PROMPT_LEN + self.n_language_tokens;
        if self.vocab_size <= specials {
            return bad(format!("vocab {} leaves no text tokens after {specials} special ids", self.vocab_size));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_are_distinct() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let sp = cfg.special();
        let mut ids = vec![sp.sot, sp.eot, sp.task];
        ids.extend((0..cfg.n_language_tokens).map(|k| sp.lang(k).unwrap()));
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(sp.text_start() as usize, n);
        assert!(sp.lang(cfg.n_language_tokens).is_none());
    }

    #[test]
    fn rejects_bad_heads_and_vocab() {
        let cfg = ModelConfig { n_heads: 3, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { vocab_size: 11, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
