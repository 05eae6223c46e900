//! Token error rate and evaluation reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{AdapterBank, LanguageId};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, DecodeConfig, Selection, Token};
use crate::synth::Utterance;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn token_error_rate(hyp: &[Token], reference: &[Token]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Decoding results for one language's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub lang: String,
    pub utterances: usize,
    /// Utterances skipped because their reference is empty.
    pub excluded: usize,
    pub errors: usize,
    pub ref_tokens: usize,
    /// `errors / ref_tokens` over the whole test set.
    pub ter: f64,
    pub hypotheses: Vec<Vec<Token>>,
}

/// Beam-decodes every utterance of `test` under `sel` with the prompt of
/// `lang`.
pub fn decode_corpus(
    base: &BaseWeights,
    sel: &Selection<'_>,
    lang: &LanguageId,
    test: &[Utterance],
    cfg: &DecodeConfig,
) -> Result<LanguageScore> {
    cfg.validate()?;
    let hyps = test
        .par_iter()
        .map(|u| base.beam_search(&u.frames, lang.index, cfg, sel).map(|h| h.tokens))
        .collect::<Result<Vec<_>>>()?;
    let (mut errors, mut ref_tokens, mut excluded) = (0, 0, 0);
    for (u, h) in test.iter().zip(&hyps) {
        let r = u.reference();
        if r.is_empty() {
            excluded += 1;
            continue;
        }
        errors += edit_distance(h, r);
        ref_tokens += r.len();
    }
    if ref_tokens == 0 {
        return Err(Error::UndefinedMetric(format!("no scorable utterances for {lang}")));
    }
    Ok(LanguageScore {
        lang: lang.code.clone(),
        utterances: test.len(),
        excluded,
        errors,
        ref_tokens,
        ter: errors as f64 / ref_tokens as f64,
        hypotheses: hyps,
    })
}

/// How evaluation picks the model for each language.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// The language's bank entry on the frozen base.
    Bank(&'a AdapterBank),
    /// The base weights alone, as for full fine-tuning baselines.
    Base,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub experiment_id: String,
    pub finetune_mode: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    /// Fingerprint of the base weights.
    pub model: String,
    pub finetune_mode: String,
    pub decode: DecodeConfig,
    pub seed: u64,
    pub per_lang: BTreeMap<String, LanguageScore>,
    pub avg: f64,
    /// SHA-256 of each evaluated language's serialized entry (and its donor's).
    pub adapters: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn per_lang_ter(&self) -> BTreeMap<&str, f64> {
        self.per_lang.iter().map(|(k, v)| (k.as_str(), v.ter)).collect()
    }

    /// Unweighted mean of the per-language TERs.
    pub fn recompute_avg(&self) -> f64 {
        mean_ter(self.per_lang.values())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn mean_ter<'a>(scores: impl Iterator<Item = &'a LanguageScore>) -> f64 {
    let (sum, n) = scores.fold((0.0, 0usize), |(s, n), v| (s + v.ter, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn adapter_fingerprint(bank: &AdapterBank, code: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(bank.entry_bytes(code)?);
    if let Some(m) = bank.entry(code).and_then(|e| e.mixture.as_ref()) {
        h.update(bank.entry_bytes(&m.donor)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Decodes every test corpus and assembles a report. A language that cannot
/// be routed fails the whole evaluation.
pub fn evaluate(
    base: &BaseWeights,
    routing: Routing<'_>,
    corpora: &[(LanguageId, &[Utterance])],
    cfg: &DecodeConfig,
    meta: &EvalMeta,
) -> Result<EvalReport> {
    let mut per_lang = BTreeMap::new();
    let mut adapters = BTreeMap::new();
    for (lang, test) in corpora {
        let score = match routing {
            Routing::Base => decode_corpus(base, &Selection::base(), lang, test, cfg)?,
            Routing::Bank(bank) => {
                let sel = bank.route(&lang.code)?;
                adapters.insert(lang.code.clone(), adapter_fingerprint(bank, &lang.code)?);
                decode_corpus(base, &sel, lang, test, cfg)?
            }
        };
        if per_lang.insert(lang.code.clone(), score).is_some() {
            return Err(Error::Conflict(lang.code.clone()));
        }
    }
    let avg = mean_ter(per_lang.values());
    Ok(EvalReport {
        experiment_id: meta.experiment_id.clone(),
        model: hex::encode(base.fingerprint()),
        finetune_mode: meta.finetune_mode.clone(),
        decode: cfg.clone(),
        seed: meta.seed,
        per_lang,
        avg,
        adapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[1, 9, 3], &[1, 2, 3]).unwrap(), 1.0 / 3.0);
        assert_eq!(token_error_rate(&[], &[1, 2]).unwrap(), 1.0);
        assert_eq!(token_error_rate(&[1, 1, 2, 2], &[1, 2]).unwrap(), 1.0);
        assert!(matches!(token_error_rate(&[1], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn edit_distance_edges() {
        assert_eq!(edit_distance::<u32>(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 3, 4, 5]), 2);
    }
}
