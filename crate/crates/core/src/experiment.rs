//! The experiment grid: a four-language base set, four added languages, the
//! LoRA bank and its expansions, and the full fine-tuning baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{AdapterBank, LanguageId};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalMeta, EvalReport, Routing};
use crate::expansion::{expand, scratch_entry, ExpansionMetrics, ExpansionPlan, Mode, MoeInit};
use crate::lora::AttachmentPolicy;
use crate::model::{BaseWeights, DecodeConfig, ModelConfig};
use crate::similarity::{most_similar, SimilarityProfile};
use crate::synth::{
    derive_seed, generate_language, ground_truth_similarity, sample_corpus, Split, SynthParams, SyntheticLanguageSpec,
    Utterance, VocabRegion,
};
use crate::training::{train_base, train_entry, TrainConfig, TrainReport, TrainScope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub params: SynthParams,
    pub region_size: usize,
    pub len_range: (usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    /// Rule overlap of each added language with its donor.
    pub new_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            params: SynthParams::default(),
            region_size: 50,
            len_range: (4, 12),
            n_train: 2000,
            n_test: 200,
            new_overlap: 0.8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(0.0..=1.0).contains(&self.new_overlap) {
            return Err(Error::Validation(format!("overlap {} outside [0, 1]", self.new_overlap)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Validation("n_train and n_test must be positive".into()));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::Validation(format!("bad length range {:?}", self.len_range)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    New,
}

/// `(code, region, donor)` of the eight languages. Base languages come in
/// two conflicting pairs (same region, no shared rule entries); each added
/// language copies most of one base language's rule.
const LAYOUT: [(&str, usize, Option<&str>); 8] = [
    ("L1", 0, None),
    ("L2", 0, Some("L1")),
    ("L3", 1, None),
    ("L4", 1, Some("L3")),
    ("N1", 0, Some("L2")),
    ("N2", 1, Some("L3")),
    ("N3", 0, Some("L1")),
    ("N4", 1, Some("L4")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub policy: String,
    pub rank: usize,
    /// Pretraining of the shared base on the base languages.
    pub base_train: TrainConfig,
    /// Per-language adapters of the bank.
    pub adapter_train: TrainConfig,
    /// Joint full fine-tuning of the base on all base languages.
    pub joint_train: TrainConfig,
    /// Training of each added language's entry, for every mode.
    pub expand_train: TrainConfig,
    /// Full fine-tuning baselines on added-language data.
    pub baseline_train: TrainConfig,
    pub decode: DecodeConfig,
    pub similarity_m: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adapters = TrainConfig { trainable_scope: TrainScope::AdaptersOnly, ..Default::default() };
        let full = TrainConfig { trainable_scope: TrainScope::BaseAll, ..Default::default() };
        Self {
            name: "default".into(),
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            policy: "full".into(),
            rank: 4,
            base_train: TrainConfig { peak_lr: 1e-3, epochs: 2, ..full.clone() },
            adapter_train: adapters.clone(),
            joint_train: full.clone(),
            expand_train: TrainConfig { epochs: 2, ..adapters },
            baseline_train: TrainConfig { epochs: 2, ..full },
            decode: DecodeConfig::default(),
            similarity_m: crate::similarity::DEFAULT_M,
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough to run the whole grid several times on
    /// one CPU core in minutes.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_in: 8,
            max_frames: 16,
            max_text_len: 8,
            vocab_size: 11 + 2 * 100,
            n_language_tokens: 8,
        };
        let data = DataConfig {
            params: SynthParams { alphabet_size: 100, d_in: 8, noise_std: 0.1, accent_std: 0.5, content_seed: 0 },
            region_size: 100,
            len_range: (3, 6),
            n_train: 400,
            n_test: 200,
            new_overlap: 0.8,
        };
        let adapters =
            TrainConfig { trainable_scope: TrainScope::AdaptersOnly, peak_lr: 1e-2, epochs: 10, ..Default::default() };
        let full = TrainConfig { trainable_scope: TrainScope::BaseAll, peak_lr: 1e-2, epochs: 10, ..Default::default() };
        Self {
            name: "desk".into(),
            seed: 0,
            model,
            data,
            policy: "full".into(),
            rank: 8,
            base_train: TrainConfig { epochs: 40, ..full.clone() },
            adapter_train: adapters.clone(),
            joint_train: full.clone(),
            expand_train: TrainConfig { epochs: 2, gate_lr_scale: 10.0, ..adapters },
            baseline_train: TrainConfig { epochs: 2, ..full },
            decode: DecodeConfig { beam_size: 5, max_decode_len: 9, length_penalty: 0.0 },
            similarity_m: 100,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Validation(format!("unknown preset {other:?} (default, desk)"))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        AttachmentPolicy::by_name(&self.policy)?;
        for (what, t, scope) in [
            ("base_train", &self.base_train, TrainScope::BaseAll),
            ("adapter_train", &self.adapter_train, TrainScope::AdaptersOnly),
            ("joint_train", &self.joint_train, TrainScope::BaseAll),
            ("expand_train", &self.expand_train, TrainScope::AdaptersOnly),
            ("baseline_train", &self.baseline_train, TrainScope::BaseAll),
        ] {
            t.validate()?;
            if t.trainable_scope != scope {
                return Err(Error::Validation(format!("{what} must use scope {scope:?}")));
            }
        }
        self.decode.validate()?;
        if self.data.params.d_in != self.model.d_in {
            return Err(Error::Validation("data d_in differs from model d_in".into()));
        }
        if self.data.len_range.1 > self.model.max_text_len || self.data.len_range.1 > self.model.max_frames {
            return Err(Error::Validation("utterances longer than the model accepts".into()));
        }
        if self.model.n_language_tokens < LAYOUT.len() {
            return Err(Error::Validation(format!("model needs at least {} language tokens", LAYOUT.len())));
        }
        let need = self.model.special().text_start() as usize + 2 * self.data.region_size;
        if need > self.model.vocab_size {
            return Err(Error::Capacity(format!("two regions of {} need vocab {need}", self.data.region_size)));
        }
        if self.similarity_m == 0 || self.similarity_m > self.data.n_test {
            return Err(Error::Validation("similarity_m must lie in 1..=n_test".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn region(&self, i: usize) -> VocabRegion {
        let start = self.model.special().text_start() + (i * self.data.region_size) as u32;
        VocabRegion { start, len: self.data.region_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageManifest {
    pub spec: SyntheticLanguageSpec,
    pub role: Role,
    pub donor: Option<String>,
    pub len_range: (usize, usize),
    /// Seeds both splits; train and test draw from disjoint seed streams.
    pub corpus_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl LanguageManifest {
    pub fn materialize(&self, eot: u32) -> Result<LanguageData> {
        Ok(LanguageData {
            manifest: self.clone(),
            train: sample_corpus(&self.spec, self.n_train, self.len_range, self.corpus_seed, Split::Train, eot)?,
            test: sample_corpus(&self.spec, self.n_test, self.len_range, self.corpus_seed, Split::Test, eot)?,
        })
    }
}

/// Specs and manifests of all eight languages.
pub fn language_manifests(cfg: &ExperimentConfig) -> Result<Vec<LanguageManifest>> {
    cfg.validate()?;
    let mut params = cfg.data.params.clone();
    params.content_seed = cfg.stage_seed("content");
    let mut specs: Vec<SyntheticLanguageSpec> = Vec::new();
    let mut out = Vec::new();
    for (k, (code, region, donor)) in LAYOUT.iter().enumerate() {
        let role = if k < 4 { Role::Base } else { Role::New };
        let base = donor.map(|d| specs.iter().find(|s| s.lang.code == d).expect("donor precedes"));
        let overlap = match (role, base) {
            (Role::New, Some(_)) => cfg.data.new_overlap,
            _ => 0.0,
        };
        let spec = generate_language(
            base,
            overlap,
            LanguageId::new(*code, k),
            cfg.region(*region),
            &params,
            cfg.stage_seed(&format!("lang/{code}")),
        )?;
        out.push(LanguageManifest {
            spec: spec.clone(),
            role,
            donor: (role == Role::New).then(|| donor.unwrap().to_string()),
            len_range: cfg.data.len_range,
            corpus_seed: cfg.stage_seed(&format!("corpus/{code}")),
            n_train: cfg.data.n_train,
            n_test: cfg.data.n_test,
        });
        specs.push(spec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageData {
    pub manifest: LanguageManifest,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl LanguageData {
    pub fn id(&self) -> &LanguageId {
        &self.manifest.spec.lang
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub languages: Vec<LanguageData>,
}

impl Suite {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_manifests(&language_manifests(cfg)?, cfg.model.special().eot)
    }

    pub fn from_manifests(manifests: &[LanguageManifest], eot: u32) -> Result<Self> {
        Ok(Self { languages: manifests.iter().map(|m| m.materialize(eot)).collect::<Result<_>>()? })
    }

    pub fn role(&self, role: Role) -> impl Iterator<Item = &LanguageData> {
        self.languages.iter().filter(move |l| l.manifest.role == role)
    }

    pub fn get(&self, code: &str) -> Result<&LanguageData> {
        self.languages.iter().find(|l| l.id().code == code).ok_or_else(|| Error::Routing(code.into()))
    }

    pub fn base_ids(&self) -> Vec<LanguageId> {
        self.role(Role::Base).map(|l| l.id().clone()).collect()
    }

    /// Concatenated training data of `role`, in language order.
    pub fn pooled_train(&self, role: Role) -> Vec<Utterance> {
        self.role(role).flat_map(|l| l.train.iter().cloned()).collect()
    }

    pub fn test_sets(&self, role: Role) -> Vec<(LanguageId, &[Utterance])> {
        self.role(role).map(|l| (l.id().clone(), l.test.as_slice())).collect()
    }

    /// Base language whose rule agrees least with `code`'s (ties to the
    /// lowest index).
    pub fn least_similar_base(&self, code: &str) -> Result<String> {
        let spec = &self.get(code)?.manifest.spec;
        let mut best: Option<(f64, String)> = None;
        for l in self.role(Role::Base) {
            let s = ground_truth_similarity(spec, &l.manifest.spec)?;
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, l.id().code.clone()));
            }
        }
        Ok(best.expect("base set is nonempty").1)
    }
}

/// Seeded base initialization followed by joint pretraining on the base
/// languages (language-identification target included).
pub fn pretrain_base(cfg: &ExperimentConfig, suite: &Suite) -> Result<(BaseWeights, TrainReport)> {
    let mut base = BaseWeights::init(cfg.model.clone(), cfg.stage_seed("base/init"))?;
    let tc = TrainConfig { seed: cfg.stage_seed("base/train"), ..cfg.base_train.clone() };
    let report = train_base(&mut base, &suite.pooled_train(Role::Base), &tc)?;
    Ok((base, report))
}

/// One adapter set per base language, each trained on its own data only.
pub fn train_bank(cfg: &ExperimentConfig, base: &BaseWeights, suite: &Suite) -> Result<(AdapterBank, BTreeMap<String, TrainReport>)> {
    let policy = AttachmentPolicy::by_name(&cfg.policy)?;
    let mut bank = AdapterBank::new(policy, base.config().dims(), base.fingerprint());
    let mut reports = BTreeMap::new();
    for l in suite.role(Role::Base) {
        let code = &l.id().code;
        let seed = cfg.stage_seed(&format!("bank/{code}"));
        let mut entry = scratch_entry(&bank, l.id().clone(), cfg.rank, seed)?;
        let tc = TrainConfig { seed, ..cfg.adapter_train.clone() };
        reports.insert(code.clone(), train_entry(base, &mut entry, None, &l.train, &tc)?);
        bank.add_language(entry)?;
    }
    Ok((bank, reports))
}

/// Full fine-tuning of a copy of `start` on `corpus`.
pub fn full_finetune(start: &BaseWeights, corpus: &[Utterance], tc: &TrainConfig) -> Result<(BaseWeights, TrainReport)> {
    let mut model = start.clone();
    let report = train_base(&mut model, corpus, tc)?;
    Ok((model, report))
}

/// Joint multilingual full fine-tuning on the base languages.
pub fn joint_finetune(cfg: &ExperimentConfig, base: &BaseWeights, suite: &Suite) -> Result<(BaseWeights, TrainReport)> {
    let tc = TrainConfig { seed: cfg.stage_seed("joint"), ..cfg.joint_train.clone() };
    full_finetune(base, &suite.pooled_train(Role::Base), &tc)
}

/// A separately fine-tuned full model per base language.
pub fn per_language_finetune(cfg: &ExperimentConfig, base: &BaseWeights, suite: &Suite) -> Result<Vec<(LanguageId, BaseWeights)>> {
    suite
        .role(Role::Base)
        .map(|l| {
            let tc = TrainConfig { seed: cfg.stage_seed(&format!("mono/{}", l.id().code)), ..cfg.joint_train.clone() };
            Ok((l.id().clone(), full_finetune(base, &l.train, &tc)?.0))
        })
        .collect()
}

/// Full fine-tuning on added-language data, optionally rehearsing the base
/// languages too.
pub fn new_language_finetune(cfg: &ExperimentConfig, start: &BaseWeights, suite: &Suite, rehearsal: bool) -> Result<(BaseWeights, TrainReport)> {
    let mut corpus = suite.pooled_train(Role::New);
    if rehearsal {
        corpus.extend(suite.pooled_train(Role::Base));
    }
    let tag = if rehearsal { "full_plus" } else { "new_only" };
    let tc = TrainConfig { seed: cfg.stage_seed(tag), ..cfg.baseline_train.clone() };
    full_finetune(start, &corpus, &tc)
}

/// How each added language's donor is chosen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorChoice {
    /// Argmax of the estimated similarity profile.
    Auto,
    /// The base language with the lowest rule agreement.
    LeastSimilar,
    Fixed(String),
}

impl std::str::FromStr for DonorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => DonorChoice::Auto,
            "least" => DonorChoice::LeastSimilar,
            code => DonorChoice::Fixed(code.to_string()),
        })
    }
}

pub fn similarity_profile(cfg: &ExperimentConfig, base: &BaseWeights, suite: &Suite, code: &str) -> Result<SimilarityProfile> {
    let l = suite.get(code)?;
    most_similar(base, &suite.base_ids(), &l.test, cfg.similarity_m, cfg.stage_seed(&format!("similarity/{code}")))
}

/// Expands a copy of `bank` with every added language in `mode`.
pub fn expand_all(
    cfg: &ExperimentConfig,
    base: &BaseWeights,
    bank: &AdapterBank,
    suite: &Suite,
    mode: Mode,
    donors: &BTreeMap<String, String>,
) -> Result<(AdapterBank, Vec<ExpansionMetrics>)> {
    let mut bank = bank.clone();
    let mut metrics = Vec::new();
    for l in suite.role(Role::New) {
        let code = &l.id().code;
        let plan = ExpansionPlan {
            new_lang: l.id().clone(),
            mode,
            donor: (mode != Mode::Scratch).then(|| donors[code].clone()),
            gate_init: (0.0, 0.0),
            rank: cfg.rank,
            moe_init: MoeInit::Donor,
        };
        let tc = TrainConfig { seed: cfg.stage_seed(&format!("expand/{code}")), ..cfg.expand_train.clone() };
        metrics.push(expand(base, &mut bank, &plan, &l.train, &l.test, &tc, &cfg.decode)?);
    }
    Ok((bank, metrics))
}

pub fn resolve_donors(
    cfg: &ExperimentConfig,
    base: &BaseWeights,
    suite: &Suite,
    choice: &DonorChoice,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, SimilarityProfile>)> {
    let mut donors = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    for l in suite.role(Role::New) {
        let code = l.id().code.clone();
        let donor = match choice {
            DonorChoice::Auto => {
                let p = similarity_profile(cfg, base, suite, &code)?;
                let d = p.argmax_language.code.clone();
                profiles.insert(code.clone(), p);
                d
            }
            DonorChoice::LeastSimilar => suite.least_similar_base(&code)?,
            DonorChoice::Fixed(d) => d.clone(),
        };
        donors.insert(code, donor);
    }
    Ok((donors, profiles))
}

/// Everything the grid produces for one seed.
#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub base: BaseWeights,
    pub bank: AdapterBank,
    pub expanded: BTreeMap<String, AdapterBank>,
    pub reports: BTreeMap<String, EvalReport>,
    pub similarity: BTreeMap<String, SimilarityProfile>,
    pub donors: BTreeMap<String, String>,
    pub expansions: BTreeMap<String, Vec<ExpansionMetrics>>,
    pub train_logs: BTreeMap<String, TrainReport>,
}

/// Report names: `E2_base` (joint full fine-tune), `E4_base` (bank before
/// expansion), `E5_base` (full fine-tune on added data), `E7`..`E9` for the
/// scratch, warm and mixture expansions (`_base` and `_new` test sets), and
/// `E8least_new` for warm start from the least similar donor.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let suite = Suite::generate(cfg)?;
    let meta = |id: &str, mode: &str| EvalMeta { experiment_id: id.into(), finetune_mode: mode.into(), seed: cfg.seed };
    let base_sets = suite.test_sets(Role::Base);
    let new_sets = suite.test_sets(Role::New);
    let mut reports = BTreeMap::new();
    let mut train_logs = BTreeMap::new();

    let (base, log) = pretrain_base(cfg, &suite)?;
    train_logs.insert("base".to_string(), log);
    let (bank, logs) = train_bank(cfg, &base, &suite)?;
    for (k, v) in logs {
        train_logs.insert(format!("bank/{k}"), v);
    }
    reports.insert("E4_base".into(), evaluate(&base, Routing::Bank(&bank), &base_sets, &cfg.decode, &meta("E4", "lora"))?);

    let (joint, log) = joint_finetune(cfg, &base, &suite)?;
    train_logs.insert("joint".into(), log);
    reports.insert("E2_base".into(), evaluate(&joint, Routing::Base, &base_sets, &cfg.decode, &meta("E2", "full"))?);
    let (forgetful, log) = new_language_finetune(cfg, &joint, &suite, false)?;
    train_logs.insert("new_only".into(), log);
    reports.insert("E5_base".into(), evaluate(&forgetful, Routing::Base, &base_sets, &cfg.decode, &meta("E5", "full"))?);

    let (donors, similarity) = resolve_donors(cfg, &base, &suite, &DonorChoice::Auto)?;
    let (least, _) = resolve_donors(cfg, &base, &suite, &DonorChoice::LeastSimilar)?;
    let mut expanded = BTreeMap::new();
    let mut expansions = BTreeMap::new();
    for (id, mode, donor_map) in
        [("E7", Mode::Scratch, &donors), ("E8", Mode::WarmStart, &donors), ("E9", Mode::Moe, &donors), ("E8least", Mode::WarmStart, &least)]
    {
        let (b, m) = expand_all(cfg, &base, &bank, &suite, mode, donor_map)?;
        let mode_name = format!("lora_{mode}");
        if id != "E8least" {
            reports.insert(format!("{id}_base"), evaluate(&base, Routing::Bank(&b), &base_sets, &cfg.decode, &meta(id, &mode_name))?);
        }
        reports.insert(format!("{id}_new"), evaluate(&base, Routing::Bank(&b), &new_sets, &cfg.decode, &meta(id, &mode_name))?);
        expanded.insert(id.to_string(), b);
        expansions.insert(id.to_string(), m);
    }
    Ok(GridOutcome { base, bank, expanded, reports, similarity, donors, expansions, train_logs })
}
