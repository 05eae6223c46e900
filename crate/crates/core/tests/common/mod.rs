#![allow(dead_code)]

use lorawhisper::bank::{AdapterBank, BankEntry, LanguageId};
use lorawhisper::expansion::scratch_entry;
use lorawhisper::lora::AttachmentPolicy;
use lorawhisper::model::{BaseWeights, ModelConfig};
use lorawhisper::synth::{generate_language, sample_corpus, Split, SynthParams, SyntheticLanguageSpec, Utterance, VocabRegion};
use lorawhisper::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough that a full finite-difference sweep takes seconds.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 12,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_in: 4,
        max_frames: 8,
        max_text_len: 6,
        vocab_size: 20,
        n_language_tokens: 4,
    }
}

pub fn tiny_base(seed: u64) -> BaseWeights {
    BaseWeights::init(tiny_config(), seed).unwrap()
}

pub fn tiny_params() -> SynthParams {
    SynthParams { alphabet_size: 6, d_in: 4, noise_std: 0.1, accent_std: 0.5, content_seed: 11 }
}

/// Text tokens start at 3 + n_language_tokens.
pub fn tiny_region() -> VocabRegion {
    VocabRegion { start: 7, len: 13 }
}

pub fn tiny_language(code: &str, index: usize, seed: u64) -> SyntheticLanguageSpec {
    generate_language(None, 0.0, LanguageId::new(code, index), tiny_region(), &tiny_params(), seed).unwrap()
}

pub fn tiny_corpus(spec: &SyntheticLanguageSpec, n: usize, seed: u64, split: Split) -> Vec<Utterance> {
    sample_corpus(spec, n, (2, 4), seed, split, 1).unwrap()
}

/// An empty bank over `base` with the full attachment policy.
pub fn empty_bank(base: &BaseWeights) -> AdapterBank {
    AdapterBank::new(AttachmentPolicy::full(), base.config().dims(), base.fingerprint())
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A scratch entry whose B matrices are randomized, so every adapter
/// gradient is generically nonzero.
pub fn random_entry(bank: &AdapterBank, lang: LanguageId, rank: usize, seed: u64) -> BankEntry {
    let mut e = scratch_entry(bank, lang, rank, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for ad in &mut e.adapters {
        ad.b = random_tensor(&mut rng, ad.b.rows(), ad.b.cols(), 0.3);
    }
    e
}
pub mod oracles;
