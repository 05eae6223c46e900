//! Seeded synthetic "languages": token transduction tasks whose pairwise
//! similarity is set by how many rule entries they share.
//!
//! A language maps each source symbol `s` of a shared alphabet to a target
//! token `π(s)` in its vocabulary region. An utterance is a random source
//! string; its frames are per-symbol embeddings plus white noise, and its
//! text is `π` applied to the source followed by `EOT`.
//!
//! A symbol embedding is a corpus-wide content vector plus a per-language
//! accent. Symbols whose rule entry is copied from a donor also copy the
//! donor's accent, so acoustic similarity tracks rule overlap.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::LanguageId;
use crate::error::{Error, Result};
use crate::model::Token;
use crate::numerics::Tensor;

/// Deterministic child seed of `seed` for a named purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Half-open target token range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRegion {
    pub start: Token,
    pub len: usize,
}

impl VocabRegion {
    pub fn end(&self) -> Token {
        self.start + self.len as Token
    }

    pub fn contains(&self, t: Token) -> bool {
        t >= self.start && t < self.end()
    }
}

/// Generation parameters shared by all languages of one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub alphabet_size: usize,
    pub d_in: usize,
    pub noise_std: f64,
    /// Scale of the per-language accent added to the shared content vector.
    pub accent_std: f64,
    pub content_seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { alphabet_size: 50, d_in: 16, noise_std: 0.1, accent_std: 0.5, content_seed: 0 }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 || self.d_in == 0 {
            return Err(Error::Validation("alphabet_size and d_in must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !(self.accent_std >= 0.0 && self.accent_std.is_finite()) {
            return Err(Error::Validation("noise_std and accent_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub lang: LanguageId,
    pub region: VocabRegion,
    /// `rule[s]` is the target token of source symbol `s`.
    pub rule: Vec<Token>,
    pub overlap_targets: BTreeMap<String, f64>,
    pub params: SynthParams,
    /// Accent seed of every source symbol.
    pub accent_seeds: Vec<u64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub lang: LanguageId,
    pub seed: u64,
    pub source: Vec<usize>,
    pub frames: Tensor,
    /// Target tokens followed by `EOT`.
    pub text: Vec<Token>,
}

impl Utterance {
    /// Reference text without the end token.
    pub fn reference(&self) -> &[Token] {
        &self.text[..self.text.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Builds a language, copying `⌊overlap·V⌋` rule entries from `base` and
/// drawing the rest from `region`. Fresh entries never agree with `base`, so
/// the realized overlap is exactly the copied fraction.
pub fn generate_language(
    base: Option<&SyntheticLanguageSpec>,
    overlap: f64,
    lang: LanguageId,
    region: VocabRegion,
    params: &SynthParams,
    seed: u64,
) -> Result<SyntheticLanguageSpec> {
    params.validate()?;
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Validation(format!("overlap {overlap} outside [0, 1]")));
    }
    if overlap > 0.0 && base.is_none() {
        return Err(Error::Validation("a positive overlap needs a base language".into()));
    }
    if region.len == 0 {
        return Err(Error::Capacity(format!("empty vocabulary region for {lang}")));
    }
    let v = params.alphabet_size;
    if let Some(b) = base {
        if b.rule.len() != v {
            return Err(Error::Contract(format!("alphabet of {} is {}, expected {v}", b.lang, b.rule.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_copy = ((overlap * v as f64) + 1e-9).floor() as usize;
    let mut copied = vec![false; v];
    for s in sample(&mut rng, v, n_copy) {
        copied[s] = true;
    }
    let mut rule = Vec::with_capacity(v);
    let mut accent_seeds = Vec::with_capacity(v);
    for s in 0..v {
        let own_accent: u64 = rng.random();
        match base {
            Some(b) if copied[s] => {
                rule.push(b.rule[s]);
                accent_seeds.push(b.accent_seeds[s]);
            }
            _ => {
                let avoid = base.map(|b| b.rule[s]).filter(|&t| region.contains(t));
                let choices = region.len - usize::from(avoid.is_some());
                if choices == 0 {
                    return Err(Error::Capacity(format!("region of {} tokens cannot avoid the donor token", region.len)));
                }
                let mut t = region.start + rng.random_range(0..choices) as Token;
                if let Some(a) = avoid {
                    if t >= a {
                        t += 1;
                    }
                }
                rule.push(t);
                accent_seeds.push(own_accent);
            }
        }
    }
    let overlap_targets = base.map(|b| BTreeMap::from([(b.lang.code.clone(), overlap)])).unwrap_or_default();
    Ok(SyntheticLanguageSpec { lang, region, rule, overlap_targets, params: params.clone(), accent_seeds, seed })
}

/// Fraction of source symbols on which the two rules agree.
pub fn ground_truth_similarity(a: &SyntheticLanguageSpec, b: &SyntheticLanguageSpec) -> Result<f64> {
    if a.rule.len() != b.rule.len() || a.params.d_in != b.params.d_in || a.params.content_seed != b.params.content_seed {
        return Err(Error::Contract(format!("{} and {} do not share a source alphabet", a.lang, b.lang)));
    }
    let agree = a.rule.iter().zip(&b.rule).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.rule.len() as f64)
}

impl SyntheticLanguageSpec {
    pub fn alphabet_size(&self) -> usize {
        self.rule.len()
    }

    /// Noiseless frame of every source symbol, `V x d_in`.
    pub fn symbol_embeddings(&self) -> Tensor {
        let d = self.params.d_in;
        let mut data = Vec::with_capacity(self.rule.len() * d);
        for (s, &accent_seed) in self.accent_seeds.iter().enumerate() {
            let mut content_rng = ChaCha8Rng::seed_from_u64(self.params.content_seed);
            content_rng.set_stream(s as u64);
            let content = normal_vec(&mut content_rng, d, 1.0);
            let accent = normal_vec(&mut ChaCha8Rng::seed_from_u64(accent_seed), d, self.params.accent_std);
            data.extend(content.iter().zip(&accent).map(|(c, a)| c + a));
        }
        Tensor::from_vec(self.rule.len(), d, data).expect("embedding table shape")
    }

    pub fn transduce(&self, source: &[usize]) -> Vec<Token> {
        source.iter().map(|&s| self.rule[s]).collect()
    }
}

/// Seed of utterance `i` of `split`. Train and test seeds come from disjoint
/// (even / odd) index streams.
pub fn utterance_seed(corpus_seed: u64, split: Split, i: usize) -> u64 {
    let slot = 2 * i as u64 + u64::from(split == Split::Test);
    derive_seed(corpus_seed, &format!("utt/{slot}"))
}

pub fn sample_utterance(
    spec: &SyntheticLanguageSpec,
    table: &Tensor,
    len_range: (usize, usize),
    seed: u64,
    eot: Token,
) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(len_range.0..=len_range.1);
    let source: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.rule.len())).collect();
    let d = spec.params.d_in;
    let mut data = Vec::with_capacity(len * d);
    for &s in &source {
        let noise = normal_vec(&mut rng, d, spec.params.noise_std);
        data.extend(table.row(s).iter().zip(&noise).map(|(e, n)| e + n));
    }
    let mut text = spec.transduce(&source);
    text.push(eot);
    Utterance { lang: spec.lang.clone(), seed, source, frames: Tensor::from_vec(len, d, data).unwrap(), text }
}

/// `n_utts` utterances of `split`, a pure function of its arguments.
pub fn sample_corpus(
    spec: &SyntheticLanguageSpec,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
    split: Split,
    eot: Token,
) -> Result<Vec<Utterance>> {
    if n_utts == 0 {
        return Err(Error::Validation("n_utts must be at least 1".into()));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::Validation(format!("bad length range {len_range:?}")));
    }
    let table = spec.symbol_embeddings();
    Ok((0..n_utts).map(|i| sample_utterance(spec, &table, len_range, utterance_seed(seed, split, i), eot)).collect())
}

/// One line of the optional materialized corpus dump.
#[derive(Clone, Debug, Serialize)]
pub struct UtteranceRecord<'a> {
    pub lang: &'a str,
    pub source: &'a [usize],
    pub text: &'a [Token],
}

impl<'a> From<&'a Utterance> for UtteranceRecord<'a> {
    fn from(u: &'a Utterance) -> Self {
        Self { lang: &u.lang.code, source: &u.source, text: &u.text }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(start: Token) -> VocabRegion {
        VocabRegion { start, len: 50 }
    }

    fn lang(code: &str, i: usize) -> LanguageId {
        LanguageId::new(code, i)
    }

    #[test]
    fn full_overlap_copies_rule() {
        let p = SynthParams::default();
        let a = generate_language(None, 0.0, lang("A", 0), region(10), &p, 1).unwrap();
        let b = generate_language(Some(&a), 1.0, lang("B", 1), region(10), &p, 2).unwrap();
        assert_eq!(a.rule, b.rule);
        assert_eq!(ground_truth_similarity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn partial_overlap_is_exact() {
        let p = SynthParams::default();
        let a = generate_language(None, 0.0, lang("A", 0), region(10), &p, 1).unwrap();
        let b = generate_language(Some(&a), 0.8, lang("B", 1), region(10), &p, 2).unwrap();
        let agree = a.rule.iter().zip(&b.rule).filter(|(x, y)| x == y).count();
        assert_eq!(agree, 40);
        let c = generate_language(Some(&a), 0.0, lang("C", 2), region(10), &p, 3).unwrap();
        assert_eq!(ground_truth_similarity(&a, &c).unwrap(), 0.0);
        let d = generate_language(None, 0.0, lang("D", 3), region(60), &p, 3).unwrap();
        assert_eq!(ground_truth_similarity(&a, &d).unwrap(), 0.0);
    }

    #[test]
    fn overlap_guards() {
        let p = SynthParams::default();
        assert!(matches!(generate_language(None, 1.5, lang("A", 0), region(0), &p, 1), Err(Error::Validation(_))));
        assert!(matches!(generate_language(None, 0.5, lang("A", 0), region(0), &p, 1), Err(Error::Validation(_))));
        let a = generate_language(None, 0.0, lang("A", 0), VocabRegion { start: 5, len: 1 }, &p, 1).unwrap();
        let r = generate_language(Some(&a), 0.0, lang("B", 1), VocabRegion { start: 5, len: 1 }, &p, 1);
        assert!(matches!(r, Err(Error::Capacity(_))));
    }

    #[test]
    fn noiseless_frames_are_embeddings() {
        let p = SynthParams { noise_std: 0.0, ..Default::default() };
        let a = generate_language(None, 0.0, lang("A", 0), region(10), &p, 1).unwrap();
        let table = a.symbol_embeddings();
        for u in sample_corpus(&a, 5, (4, 12), 3, Split::Train, 1).unwrap() {
            for (i, &s) in u.source.iter().enumerate() {
                assert_eq!(u.frames.row(i), table.row(s));
            }
            assert_eq!(u.text.len(), u.source.len() + 1);
        }
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let train: Vec<u64> = (0..100).map(|i| utterance_seed(9, Split::Train, i)).collect();
        let test: Vec<u64> = (0..100).map(|i| utterance_seed(9, Split::Test, i)).collect();
        assert!(train.iter().all(|s| !test.contains(s)));
    }
}
