//! Which base language does a new language sound like? Sample segments,
//! run language identification on the base model, and count how often each
//! base language wins.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::LanguageId;
use crate::error::{Error, Result};
use crate::model::BaseWeights;
use crate::synth::Utterance;

/// Default number of sampled segments.
pub const DEFAULT_M: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub m: usize,
    pub seed: u64,
    pub base_languages: Vec<LanguageId>,
    /// Indices (into the corpus) of the sampled segments, in sampling order.
    pub segments: Vec<usize>,
    /// Restricted, renormalized language distribution of each segment.
    pub distributions: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub sim: Vec<f64>,
    pub argmax_language: LanguageId,
}

/// `p_k = p_full[k] / Σ_{j ∈ base} p_full[j]` for each `k` in `base`.
pub fn restrict_and_normalize(p_full: &[f64], base: &[usize]) -> Result<Vec<f64>> {
    if base.is_empty() {
        return Err(Error::Contract("empty base language set".into()));
    }
    if let Some(&k) = base.iter().find(|&&k| k >= p_full.len()) {
        return Err(Error::Contract(format!("language index {k} outside a distribution of {}", p_full.len())));
    }
    if p_full.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Contract("distribution has negative or non-finite entries".into()));
    }
    let mass: f64 = base.iter().map(|&k| p_full[k]).sum();
    if mass == 0.0 {
        return Err(Error::DegenerateMass);
    }
    Ok(base.iter().map(|&k| p_full[k] / mass).collect())
}

/// First index of the maximum.
pub fn argmax_low(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-language counts of segment argmaxes.
pub fn argmax_counts(profiles: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = profiles.first().ok_or_else(|| Error::Contract("no segment profiles".into()))?.len();
    if n == 0 || profiles.iter().any(|p| p.len() != n) {
        return Err(Error::Contract("profiles must share a nonzero length".into()));
    }
    let mut counts = vec![0; n];
    for p in profiles {
        counts[argmax_low(p)] += 1;
    }
    Ok(counts)
}

/// `sim_k = |{i : argmax_j p_ij = k}| / M`, ties to the lowest index.
pub fn similarity(profiles: &[Vec<f64>]) -> Result<Vec<f64>> {
    let counts = argmax_counts(profiles)?;
    let m = profiles.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / m).collect())
}

/// Samples `m` segments of `corpus` without replacement and scores each base
/// language by how often language identification on the bare base model
/// picks it.
pub fn most_similar(
    base: &BaseWeights,
    base_langs: &[LanguageId],
    corpus: &[Utterance],
    m: usize,
    seed: u64,
) -> Result<SimilarityProfile> {
    if m == 0 {
        return Err(Error::Contract("M must be at least 1".into()));
    }
    if corpus.len() < m {
        return Err(Error::Sampling { requested: m, available: corpus.len() });
    }
    let idx: Vec<usize> = base_langs.iter().map(|l| l.index).collect();
    let segments = sample(&mut ChaCha8Rng::seed_from_u64(seed), corpus.len(), m).into_vec();
    let distributions = segments
        .par_iter()
        .map(|&i| restrict_and_normalize(&base.detect_language(&corpus[i].frames)?, &idx))
        .collect::<Result<Vec<_>>>()?;
    let counts = argmax_counts(&distributions)?;
    let sim = counts.iter().map(|&c| c as f64 / m as f64).collect();
    let best = argmax_low(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok(SimilarityProfile {
        m,
        seed,
        base_languages: base_langs.to_vec(),
        segments,
        distributions,
        counts,
        sim,
        argmax_language: base_langs[best].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restrict_arithmetic() {
        let p = restrict_and_normalize(&[0.1, 0.2, 0.3, 0.15, 0.25], &[0, 1, 2]).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(restrict_and_normalize(&[0.0, 0.0, 1.0], &[0, 1]), Err(Error::DegenerateMass)));
        assert!(restrict_and_normalize(&[1.0], &[]).is_err());
    }

    #[test]
    fn direct_count() {
        let one_hot = |k: usize| {
            let mut v = vec![0.1; 3];
            v[k] = 0.8;
            v
        };
        let profiles = vec![one_hot(1), one_hot(1), one_hot(2), one_hot(1)];
        assert_eq!(similarity(&profiles).unwrap(), vec![0.0, 0.75, 0.25]);
        assert!(similarity(&[]).is_err());
    }

    #[test]
    fn ties_go_low() {
        assert_eq!(argmax_low(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(similarity(&[vec![0.5, 0.5]]).unwrap(), vec![1.0, 0.0]);
    }
}
