use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Token, PROMPT_LEN};
use crate::model::forward::Selection;
use crate::model::weights::BaseWeights;
use crate::numerics::{Tensor, softmax_into};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, counting the end token.
    pub max_decode_len: usize,
    /// GNMT-style exponent; `0` ranks by summed log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_decode_len: 16, length_penalty: 0.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Validation("beam_size must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Validation("max_decode_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Text tokens, without the end token.
    pub tokens: Vec<Token>,
    /// Summed log-probability, including the end token when finished.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn generated_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    fn ranking_score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.score
        } else {
            let lp = ((5.0 + self.generated_len() as f64) / 6.0).powf(length_penalty);
            self.score / lp
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl BaseWeights {
    fn step_limit(&self, requested: usize) -> usize {
        requested.min(self.config.max_text_len + 1)
    }

    /// Distribution over all language tokens for the first decoded position
    /// after `SOT`, using the plain base model.
    pub fn detect_language(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let sp = self.config.special();
        if sp.n_lang == 0 {
            return Err(Error::Contract("model has no language tokens".into()));
        }
        let sel = Selection::base();
        let h = self.encode(frames, &sel)?;
        let logits = self.decode_step(&[sp.sot], &[], &h, &sel)?;
        let start = sp.lang_start as usize;
        let mut p = vec![0.0; sp.n_lang];
        softmax_into(&logits[start..start + sp.n_lang], &mut p);
        Ok(p)
    }

    pub fn greedy_decode(&self, frames: &Tensor, lang: usize, max_decode_len: usize, sel: &Selection<'_>) -> Result<Hypothesis> {
        let prompt = self.config.prompt(lang)?;
        let eot = self.config.special().eot;
        let h = self.encode(frames, sel)?;
        let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
        for _ in 0..self.step_limit(max_decode_len) {
            let logp = log_softmax(&self.decode_step(&prompt, &hyp.tokens, &h, sel)?);
            let tok = top_k(&logp, 1)[0];
            hyp.score += logp[tok];
            if tok as Token == eot {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(tok as Token);
        }
        Ok(hyp)
    }

    /// Beam search under the prompt `[SOT, LANG(lang), TASK]`.
    pub fn beam_search(&self, frames: &Tensor, lang: usize, cfg: &DecodeConfig, sel: &Selection<'_>) -> Result<Hypothesis> {
        cfg.validate()?;
        let prompt = self.config.prompt(lang)?;
        debug_assert_eq!(prompt.len(), PROMPT_LEN);
        let eot = self.config.special().eot;
        let width = cfg.beam_size;
        let h = self.encode(frames, sel)?;

        let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.step_limit(cfg.max_decode_len) {
            // (score, parent, token)
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * width);
            for (pi, hyp) in live.iter().enumerate() {
                let logp = log_softmax(&self.decode_step(&prompt, &hyp.tokens, &h, sel)?);
                for tok in top_k(&logp, width) {
                    cands.push((hyp.score + logp[tok], pi, tok));
                }
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (rank, &(score, pi, tok)) in cands.iter().enumerate() {
                if next.len() == width {
                    break;
                }
                if tok as Token == eot {
                    if rank < width {
                        finished.push(Hypothesis { tokens: live[pi].tokens.clone(), score, finished: true });
                    }
                } else {
                    let mut tokens = live[pi].tokens.clone();
                    tokens.push(tok as Token);
                    next.push(Hypothesis { tokens, score, finished: false });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
            // Log-probabilities are non-positive, so no live hypothesis can
            // overtake a finished one once it is behind.
            if cfg.length_penalty == 0.0 {
                let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= live[0].score {
                    break;
                }
            }
        }
        finished.extend(live);
        let best = finished
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.ranking_score(cfg.length_penalty)
                    .partial_cmp(&b.ranking_score(cfg.length_penalty))
                    .unwrap_or(Ordering::Equal)
                    .then(ib.cmp(ia))
            })
            .map(|(_, h)| h)
            .expect("beam search keeps at least one hypothesis");
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, 3.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn beam_size_zero_is_rejected() {
        let cfg = DecodeConfig { beam_size: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
