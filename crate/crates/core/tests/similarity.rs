mod common;

use common::oracles::counting_similarity;
use common::{tiny_base, tiny_corpus, tiny_language};
use lorawhisper::similarity::{argmax_counts, most_similar, restrict_and_normalize, similarity};
use lorawhisper::synth::Split;
use lorawhisper::{Error, LanguageId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_profiles(seed: u64, m: usize, n: usize, levels: Option<u32>) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..n)
                .map(|_| match levels {
                    // Coarse values make ties common.
                    Some(l) => rng.random_range(0..l) as f64 + 1.0,
                    None => rng.random_range(0.01..1.0),
                })
                .collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect()
}

#[test]
fn two_hundred_profiles_over_five_languages() {
    for seed in 0..20 {
        let profiles = random_profiles(seed, 200, 5, None);
        assert_eq!(similarity(&profiles).unwrap(), counting_similarity(&profiles));
    }
}

proptest! {
    #[test]
    fn similarity_matches_counting_oracle(seed in any::<u64>(), m in 1usize..60, n in 1usize..7, coarse in any::<bool>()) {
        let profiles = random_profiles(seed, m, n, coarse.then_some(3));
        let sim = similarity(&profiles).unwrap();
        prop_assert_eq!(&sim, &counting_similarity(&profiles));
        prop_assert!((sim.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax_counts(&profiles).unwrap().iter().sum::<usize>(), m);
    }

    #[test]
    fn restriction_renormalizes(p in prop::collection::vec(0.0f64..1.0, 2..10), pick in prop::collection::vec(any::<prop::sample::Index>(), 1..5)) {
        let base: Vec<usize> = pick.iter().map(|i| i.index(p.len())).collect();
        let mass: f64 = base.iter().map(|&k| p[k]).sum();
        match restrict_and_normalize(&p, &base) {
            Ok(q) => {
                prop_assert!(mass > 0.0);
                for (j, &k) in base.iter().enumerate() {
                    prop_assert!((q[j] - p[k] / mass).abs() < 1e-12);
                }
            }
            Err(Error::DegenerateMass) => prop_assert_eq!(mass, 0.0),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let profiles = vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.4, 0.4], vec![1.0 / 3.0; 3]];
    assert_eq!(similarity(&profiles).unwrap(), vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
}

#[test]
fn restriction_rejects_bad_inputs() {
    assert!(matches!(restrict_and_normalize(&[0.0, 0.0, 1.0], &[0, 1]), Err(Error::DegenerateMass)));
    assert!(restrict_and_normalize(&[0.5, 0.5], &[]).is_err());
    assert!(restrict_and_normalize(&[0.5, 0.5], &[2]).is_err());
    assert!(restrict_and_normalize(&[0.5, f64::NAN], &[0]).is_err());
    assert!(similarity(&[]).is_err());
    assert!(similarity(&[vec![0.5, 0.5], vec![1.0]]).is_err());
}

#[test]
fn sampling_is_seeded_and_without_replacement() {
    let base = tiny_base(0);
    let corpus = tiny_corpus(&tiny_language("N", 2, 5), 20, 1, Split::Test);
    let langs = [LanguageId::new("A", 0), LanguageId::new("B", 1)];
    let p = most_similar(&base, &langs, &corpus, 12, 7).unwrap();
    assert_eq!(p, most_similar(&base, &langs, &corpus, 12, 7).unwrap());
    let mut seen = p.segments.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 12);
    assert_eq!(p.counts.iter().sum::<usize>(), 12);
    assert_eq!(p.sim, similarity(&p.distributions).unwrap());
    assert_ne!(p.segments, most_similar(&base, &langs, &corpus, 12, 8).unwrap().segments);
    assert!(matches!(most_similar(&base, &langs, &corpus, 21, 0), Err(Error::Sampling { requested: 21, available: 20 })));
}
