//! Adding a language to a trained bank: from scratch, warm-started from a
//! donor's adapters, or as a two-expert mixture with a frozen donor.

use serde::{Deserialize, Serialize};

use crate::bank::{AdapterBank, BankEntry, LanguageId, Mixture};
use crate::error::{dim_err, Error, Result};
use crate::evaluation::{decode_corpus, LanguageScore};
use crate::lora::{init_scratch, linear_on_tape, LoraAdapter, SiteVars};
use crate::model::{BaseWeights, DecodeConfig};
use crate::numerics::{softmax_into, Tape, Tensor};
use crate::synth::{derive_seed, Utterance};
use crate::training::{train_entry, TrainConfig, TrainReport, TrainScope};

/// Per-site logits `(g_new, g_donor)` of the two-expert mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeGate {
    pub logits: Tensor,
}

impl MoeGate {
    pub fn uniform() -> Self {
        Self::from_logits(0.0, 0.0)
    }

    pub fn from_logits(g_new: f64, g_donor: f64) -> Self {
        Self { logits: Tensor::row_vector(vec![g_new, g_donor]) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.shape() != [1, 2] {
            return dim_err(format!("gate logits have shape {:?}, expected [1, 2]", self.logits.shape()));
        }
        if !self.logits.is_finite() {
            return Err(Error::Numeric("gate logits".into()));
        }
        Ok(())
    }

    /// `(w_new, w_donor) = softmax(logits)`.
    pub fn weights(&self) -> (f64, f64) {
        let mut w = [0.0; 2];
        softmax_into(self.logits.data(), &mut w);
        (w[0], w[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Scratch,
    #[serde(rename = "warm")]
    WarmStart,
    Moe,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "warm" | "warm_start" => Ok(Mode::WarmStart),
            "moe" => Ok(Mode::Moe),
            other => Err(Error::Validation(format!("unknown expansion mode {other:?} (scratch, warm, moe)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Scratch => "scratch",
            Mode::WarmStart => "warm",
            Mode::Moe => "moe",
        })
    }
}

/// Starting point of the trainable expert in mixture mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeInit {
    /// A copy of the donor's adapters, so training starts from the donor's
    /// function at full strength.
    #[default]
    Donor,
    /// Zero-delta adapters as in scratch mode.
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub new_lang: LanguageId,
    pub mode: Mode,
    pub donor: Option<String>,
    /// Initial gate logits `(g_new, g_donor)`, mixture mode only.
    pub gate_init: (f64, f64),
    /// Rank of freshly initialized adapters.
    pub rank: usize,
    #[serde(default)]
    pub moe_init: MoeInit,
}

impl ExpansionPlan {
    pub fn validate(&self, bank: &AdapterBank) -> Result<()> {
        if bank.contains(&self.new_lang.code) {
            return Err(Error::Conflict(self.new_lang.code.clone()));
        }
        match (self.mode, &self.donor) {
            (Mode::Scratch, _) => Ok(()),
            (_, None) => Err(Error::Validation(format!("{} mode needs a donor language", self.mode))),
            (_, Some(d)) => match bank.entry(d) {
                None => Err(Error::Routing(d.clone())),
                Some(e) if e.mixture.is_some() => Err(Error::Validation(format!("donor {d} is not a base language"))),
                Some(_) => {
                    if !(self.gate_init.0.is_finite() && self.gate_init.1.is_finite()) {
                        return Err(Error::Validation("gate_init must be finite".into()));
                    }
                    Ok(())
                }
            },
        }
    }
}

/// A new entry whose adapters are element-wise copies of `donor`'s.
pub fn warm_start_entry(bank: &AdapterBank, new_lang: LanguageId, donor: &str) -> Result<BankEntry> {
    if bank.contains(&new_lang.code) {
        return Err(Error::Conflict(new_lang.code));
    }
    let d = bank.entry(donor).ok_or_else(|| Error::Routing(donor.into()))?;
    Ok(BankEntry { language: new_lang, rank: d.rank, adapters: d.adapters.clone(), mixture: None })
}

/// Adds `new_lang` as an untrained copy of `donor`.
pub fn warm_start(bank: &mut AdapterBank, new_lang: LanguageId, donor: &str) -> Result<()> {
    let e = warm_start_entry(bank, new_lang, donor)?;
    bank.add_language(e)
}

/// Zero-delta adapters for every policy site, seeded per language.
pub fn scratch_entry(bank: &AdapterBank, lang: LanguageId, rank: usize, seed: u64) -> Result<BankEntry> {
    let s = derive_seed(seed, &format!("adapter/{}", lang.code));
    let adapters = bank.policy().sites(bank.dims()).into_iter().map(|site| init_scratch(site, rank, s)).collect::<Result<Vec<_>>>()?;
    Ok(BankEntry::plain(lang, adapters))
}

/// `y = x Wᵀ + b + w_new·s·B_n(A_n x) + w_donor·s·B_d(A_d x)` for each row
/// `x`, with `(w_new, w_donor) = softmax(gate)`.
pub fn moe_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    new: &LoraAdapter,
    donor: &LoraAdapter,
    gate: &MoeGate,
) -> Result<Tensor> {
    new.validate()?;
    donor.validate()?;
    gate.validate()?;
    if new.site != donor.site {
        return dim_err(format!("mixture of adapters at {} and {}", new.site, donor.site));
    }
    let site = &new.site;
    if w.shape() != [site.d_out, site.d_in] || b.shape() != [1, site.d_out] || x.cols() != site.d_in {
        return dim_err(format!("site {site} with W {:?}, b {:?}, x {:?}", w.shape(), b.shape(), x.shape()));
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let g = tape.constant(&gate.logits);
    let p = tape.softmax_rows(g, false)?;
    let w_new = tape.slice_cols(p, 0, 1)?;
    let w_donor = tape.slice_cols(p, 1, 1)?;
    let vars = SiteVars::Mixture {
        new: (tape.constant(&new.a), tape.constant(&new.b), new.scaling),
        donor: (tape.constant(&donor.a), tape.constant(&donor.b), donor.scaling),
        w_new,
        w_donor,
    };
    let y = linear_on_tape(&mut tape, xv, wv, bv, Some(&vars))?;
    Ok(tape.to_tensor(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionMetrics {
    pub lang: String,
    pub mode: Mode,
    pub donor: Option<String>,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_ter: f64,
    pub score: LanguageScore,
    #[serde(skip)]
    pub train: TrainReport,
}

/// Trains a new entry under `plan` on `train` with the base frozen and adds
/// it to `bank`. Existing entries are never touched.
pub fn expand(
    base: &BaseWeights,
    bank: &mut AdapterBank,
    plan: &ExpansionPlan,
    train: &[Utterance],
    test: &[Utterance],
    train_cfg: &TrainConfig,
    decode: &DecodeConfig,
) -> Result<ExpansionMetrics> {
    plan.validate(bank)?;
    if bank.base_fingerprint() != &base.fingerprint() {
        return Err(Error::Fingerprint {
            expected: hex::encode(bank.base_fingerprint()),
            actual: hex::encode(base.fingerprint()),
        });
    }
    let mut cfg = train_cfg.clone();
    let (mut entry, donor) = match plan.mode {
        Mode::Scratch => {
            cfg.trainable_scope = TrainScope::AdaptersOnly;
            (scratch_entry(bank, plan.new_lang.clone(), plan.rank, cfg.seed)?, None)
        }
        Mode::WarmStart => {
            cfg.trainable_scope = TrainScope::AdaptersOnly;
            let donor = plan.donor.as_deref().expect("validated");
            (warm_start_entry(bank, plan.new_lang.clone(), donor)?, None)
        }
        Mode::Moe => {
            cfg.trainable_scope = TrainScope::AdaptersAndGate;
            let donor = plan.donor.clone().expect("validated");
            let mut e = match plan.moe_init {
                MoeInit::Donor => warm_start_entry(bank, plan.new_lang.clone(), &donor)?,
                MoeInit::Scratch => scratch_entry(bank, plan.new_lang.clone(), plan.rank, cfg.seed)?,
            };
            let gate = MoeGate::from_logits(plan.gate_init.0, plan.gate_init.1);
            e.mixture = Some(Mixture { donor: donor.clone(), gates: vec![gate; e.adapters.len()] });
            (e, bank.entry(&donor))
        }
    };
    let report = train_entry(base, &mut entry, donor, train, &cfg)?;
    bank.add_language(entry)?;
    let score = decode_corpus(base, &bank.route(&plan.new_lang.code)?, &plan.new_lang, test, decode)?;
    Ok(ExpansionMetrics {
        lang: plan.new_lang.code.clone(),
        mode: plan.mode,
        donor: plan.donor.clone().filter(|_| plan.mode != Mode::Scratch),
        seed: cfg.seed,
        epoch_losses: report.epoch_losses.clone(),
        final_ter: score.ter,
        score,
        train: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_weights_are_a_distribution() {
        let g = MoeGate::from_logits(3.0, -1.0);
        let (a, b) = g.weights();
        assert!((a + b - 1.0).abs() <= 1e-12);
        assert!(a > b);
        assert_eq!(MoeGate::uniform().weights(), (0.5, 0.5));
        assert!(MoeGate { logits: Tensor::zeros(2, 1) }.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Scratch, Mode::WarmStart, Mode::Moe] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("full".parse::<Mode>().is_err());
    }
}
