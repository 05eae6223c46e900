mod common;

use common::{empty_bank, random_entry, tiny_base, tiny_corpus, tiny_language};
use lorawhisper::bank::{load_base, save_base};
use lorawhisper::expansion::scratch_entry;
use lorawhisper::model::Selection;
use lorawhisper::synth::Split;
use lorawhisper::training::{train_entry, TrainConfig};
use lorawhisper::{AdapterBank, BaseWeights, Error, LanguageId, Tensor};
use proptest::prelude::*;
use std::sync::OnceLock;

fn four_language_bank(base: &BaseWeights) -> AdapterBank {
    let mut bank = empty_bank(base);
    for (i, code) in ["L1", "L2", "L3", "L4"].into_iter().enumerate() {
        let mut e = random_entry(&bank, LanguageId::new(code, i), 4, 10 + i as u64);
        e.snap_to_f32();
        bank.add_language(e).unwrap();
    }
    bank
}

fn shared() -> &'static (BaseWeights, Vec<u8>) {
    static BANK: OnceLock<(BaseWeights, Vec<u8>)> = OnceLock::new();
    BANK.get_or_init(|| {
        let base = tiny_base(1);
        let bytes = four_language_bank(&base).to_bytes();
        (base, bytes)
    })
}

fn logits(base: &BaseWeights, sel: &Selection<'_>, frames: &Tensor) -> Tensor {
    let h = base.encode(frames, sel).unwrap();
    base.decode_logits(&base.config().prompt(0).unwrap(), &[9, 10], &h, sel).unwrap()
}

#[test]
fn four_language_rank_four_round_trip() {
    let (base, bytes) = shared();
    let bank = AdapterBank::from_bytes(bytes, Some(&base.fingerprint())).unwrap();
    assert_eq!(bank.to_bytes(), *bytes);
    assert_eq!(bank.languages().map(|l| l.code.as_str()).collect::<Vec<_>>(), ["L1", "L2", "L3", "L4"]);
    assert!(bank.entries().iter().all(|e| e.rank == 4));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.lwbk");
    bank.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), *bytes);
    assert_eq!(AdapterBank::load(&path, Some(&base.fingerprint())).unwrap(), bank);
}

#[test]
fn base_round_trip_and_fingerprint_guard() {
    let (base, bytes) = shared();
    let mut snapped = base.clone();
    snapped.snap_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.lwbk");
    save_base(&snapped, &path).unwrap();
    let loaded = load_base(&path).unwrap();
    assert_eq!(loaded, snapped);
    assert_eq!(loaded.fingerprint(), snapped.fingerprint());

    let other = tiny_base(2);
    match AdapterBank::from_bytes(bytes, Some(&other.fingerprint())) {
        Err(Error::Fingerprint { .. }) => {}
        r => panic!("expected a fingerprint error, got {r:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn any_single_byte_flip_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8, with_expected in any::<bool>()) {
        let (base, bytes) = shared();
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= 1 << bit;
        let fp = base.fingerprint();
        let expected = with_expected.then_some(&fp);
        prop_assert!(AdapterBank::from_bytes(&bad, expected).is_err(), "flip at {} undetected", i);
    }

    #[test]
    fn truncation_is_detected(cut in 1usize..200) {
        let (_, bytes) = shared();
        let cut = cut.min(bytes.len());
        prop_assert!(AdapterBank::from_bytes(&bytes[..bytes.len() - cut], None).is_err());
    }

    #[test]
    fn base_byte_flips_are_detected(pos in any::<prop::sample::Index>()) {
        let (base, _) = shared();
        let mut snapped = base.clone();
        snapped.snap_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.lwbk");
        save_base(&snapped, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        prop_assert!(load_base(&path).is_err(), "flip at {} undetected", i);
    }
}

#[test]
fn site_corruption_names_language_and_site() {
    let (_, bytes) = shared();
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0xff;
    match AdapterBank::from_bytes(&bad, None) {
        Err(Error::Checksum { lang, site }) => {
            assert!(lang.starts_with('L'), "{lang}");
            assert!(site.is_some());
        }
        r => panic!("expected a checksum error, got {r:?}"),
    }
}

#[test]
fn trained_languages_route_differently_and_expansion_is_isolated() {
    let base = tiny_base(3);
    let mut bank = empty_bank(&base);
    let cfg = TrainConfig { peak_lr: 1e-2, epochs: 3, batch_size: 8, ..TrainConfig::default() };
    for (i, code) in ["L1", "L2"].into_iter().enumerate() {
        let spec = tiny_language(code, i, 20 + i as u64);
        let corpus = tiny_corpus(&spec, 24, 5, Split::Train);
        let mut e = scratch_entry(&bank, spec.lang.clone(), 2, i as u64).unwrap();
        train_entry(&base, &mut e, None, &corpus, &cfg).unwrap();
        bank.add_language(e).unwrap();
    }
    let frames = tiny_corpus(&tiny_language("X", 0, 99), 1, 0, Split::Test)[0].frames.clone();
    let l1 = logits(&base, &bank.route("L1").unwrap(), &frames);
    let l2 = logits(&base, &bank.route("L2").unwrap(), &frames);
    assert!(l1.max_abs_diff(&l2) > 1e-6);
    assert!(l1.max_abs_diff(&logits(&base, &Selection::base(), &frames)) > 1e-6);

    let before_bytes = bank.entry_bytes("L1").unwrap();
    let hyp_before = base.greedy_decode(&frames, 0, 6, &bank.route("L1").unwrap()).unwrap();
    bank.add_language(random_entry(&bank, LanguageId::new("L5", 2), 3, 50)).unwrap();
    assert_eq!(bank.entry_bytes("L1").unwrap(), before_bytes);
    assert_eq!(logits(&base, &bank.route("L1").unwrap(), &frames), l1);
    assert_eq!(base.greedy_decode(&frames, 0, 6, &bank.route("L1").unwrap()).unwrap(), hyp_before);

    assert!(matches!(bank.route("L9"), Err(Error::Routing(_))));
    assert!(matches!(bank.add_language(random_entry(&bank, LanguageId::new("L1", 0), 2, 1)), Err(Error::Conflict(_))));
}
