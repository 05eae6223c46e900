mod common;

use common::oracles::{add_scaled, dense_affine, dense_delta, random_instance};
use common::{empty_bank, random_tensor, tiny_base};
use lorawhisper::expansion::scratch_entry;
use lorawhisper::lora::{
    check_rank, count_lora_params, effective_rank, init_scratch, lora_forward, AttachmentPolicy, AttachmentSite,
    Component, LoraAdapter, Matrix, ModelDims,
};
use lorawhisper::{LanguageId, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn site(d_out: usize, d_in: usize) -> AttachmentSite {
    AttachmentSite { layer: 0, component: Component::EncSelf, matrix: Matrix::V, d_out, d_in }
}

fn random_adapter(seed: u64, d_out: usize, d_in: usize, rank: usize) -> LoraAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LoraAdapter {
        site: site(d_out, d_in),
        rank,
        a: random_tensor(&mut rng, rank, d_in, 1.0),
        b: random_tensor(&mut rng, d_out, rank, 1.0),
        scaling: 0.75,
    }
}

/// Singular values of the dense delta, by full SVD.
fn dense_singular_values(ad: &LoraAdapter) -> Vec<f64> {
    let d = dense_delta(ad);
    DMatrix::from_row_slice(d.rows(), d.cols(), d.data()).svd(false, false).singular_values.iter().copied().collect()
}

#[test]
fn eight_by_eight_rank_two_matches_dense_weights() {
    let ad = random_adapter(1, 8, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w, b) = (random_tensor(&mut rng, 5, 8, 1.0), random_tensor(&mut rng, 8, 8, 1.0), random_tensor(&mut rng, 1, 8, 1.0));
    let y = lora_forward(&x, &w, &b, &ad).unwrap();
    let oracle = dense_affine(&x, &add_scaled(&w, &dense_delta(&ad), 1.0), &b);
    assert!(y.max_abs_diff(&oracle) < 1e-10);
    assert!(ad.materialize_delta().max_abs_diff(&dense_delta(&ad)) < 1e-12);
}

proptest! {
    #[test]
    fn lora_forward_matches_dense_on_random_instances(seed in any::<u64>()) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let y = lora_forward(&inst.x, &inst.w, &inst.b, &inst.new).unwrap();
        let oracle = dense_affine(&inst.x, &add_scaled(&inst.w, &dense_delta(&inst.new), 1.0), &inst.b);
        prop_assert!(y.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn delta_rank_never_exceeds_r(seed in any::<u64>(), d_out in 3usize..12, d_in in 3usize..12, r_frac in 0.0f64..1.0) {
        let max_rank = d_out.min(d_in) - 1;
        let rank = 1 + ((max_rank - 1) as f64 * r_frac) as usize;
        let ad = random_adapter(seed, d_out, d_in, rank);
        let sv = dense_singular_values(&ad);
        let s1 = sv.iter().cloned().fold(0.0, f64::max);
        let numeric = sv.iter().filter(|&&s| s > 1e-10 * s1).count();
        prop_assert!(numeric <= rank);
        prop_assert_eq!(effective_rank(&ad, 1e-10), numeric);
    }

    #[test]
    fn parameter_count_is_linear_in_rank(r in 1usize..200, d in 256usize..1024) {
        let dims = ModelDims { d_model: d, ffn_dim: 4 * d, n_enc_layers: 3, n_dec_layers: 2 };
        for policy in [AttachmentPolicy::full(), AttachmentPolicy::qkv_fc1()] {
            let one = count_lora_params(&dims, 1, &policy);
            prop_assert_eq!(count_lora_params(&dims, r, &policy), r * one);
        }
    }
}

#[test]
fn sixteen_square_rank_four_has_four_singular_values() {
    let ad = random_adapter(7, 16, 16, 4);
    let sv = dense_singular_values(&ad);
    let s1 = sv.iter().cloned().fold(0.0, f64::max);
    assert_eq!(sv.iter().filter(|&&s| s > 1e-10 * s1).count(), 4);
    assert_eq!(effective_rank(&ad, 1e-10), 4);
}

#[test]
fn effective_rank_edge_cases() {
    let zero = init_scratch(site(6, 5), 3, 0).unwrap();
    assert_eq!(effective_rank(&zero, 1e-10), 0);

    // Identical columns in B and rows in A collapse to rank one.
    let mut rank_one = random_adapter(3, 6, 5, 3);
    let a0 = rank_one.a.row(0).to_vec();
    let b0: Vec<f64> = (0..6).map(|i| rank_one.b.get(i, 0)).collect();
    rank_one.a = Tensor::from_rows(&[a0.clone(), a0.clone(), a0]).unwrap();
    rank_one.b = Tensor::from_vec(6, 3, b0.iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
    assert_eq!(effective_rank(&rank_one, 1e-10), 1);

    let mut scaled = random_adapter(4, 6, 5, 2);
    let before = effective_rank(&scaled, 1e-10);
    scaled.scaling = 1e6;
    assert_eq!(effective_rank(&scaled, 1e-10), before);
}

#[test]
fn rank_bounds() {
    let s = site(6, 5);
    assert!(check_rank(&s, 4).is_ok());
    assert!(check_rank(&s, 5).is_err());
    assert!(check_rank(&s, 0).is_err());
    assert!(init_scratch(s, 5, 0).is_err());
}

#[test]
fn scratch_init_is_zero_delta_and_seeded() {
    let a = init_scratch(site(6, 5), 2, 11).unwrap();
    assert_eq!(dense_delta(&a), Tensor::zeros(6, 5));
    assert_eq!(a, init_scratch(site(6, 5), 2, 11).unwrap());
    assert_ne!(a.a, init_scratch(site(6, 5), 2, 12).unwrap().a);
    assert!(a.a.is_f32_exact());
}

#[test]
fn count_equals_instantiated_parameters() {
    let base = tiny_base(0);
    let bank = empty_bank(&base);
    for rank in 1..4 {
        let entry = scratch_entry(&bank, LanguageId::new("L1", 0), rank, 0).unwrap();
        let instantiated: usize = entry.adapters.iter().map(|a| a.a.len() + a.b.len()).sum();
        assert_eq!(count_lora_params(&base.config().dims(), rank, &AttachmentPolicy::full()), instantiated);
    }
}

#[test]
fn whisper_small_counts_by_hand() {
    let (d, f) = (768usize, 3072usize);
    for r in [4usize, 8, 16, 32] {
        let attn = 4 * r * (d + d);
        let mlp = 2 * r * (d + f);
        let full = 12 * (attn + mlp) + 12 * (2 * attn + mlp);
        assert_eq!(count_lora_params(&ModelDims::whisper_small(), r, &AttachmentPolicy::full()), full);
        let qkv = 3 * r * (d + d);
        let fc1 = r * (d + f);
        let partial = 12 * (qkv + fc1) + 12 * (2 * qkv + fc1);
        assert_eq!(count_lora_params(&ModelDims::whisper_small(), r, &AttachmentPolicy::qkv_fc1()), partial);
    }
}
