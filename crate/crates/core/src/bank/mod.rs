//! Per-language adapter sets, routing, and persistence.

mod format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::MoeGate;
use crate::lora::{AttachmentPolicy, LoraAdapter, ModelDims};
use crate::model::{Selection, SiteBinding};

pub use format::{load_base, save_base, BankManifest, ManifestLanguage, Provenance, FORMAT_VERSION, MAGIC};

/// A language, identified by a short code and the index of its `LANG` token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguageId {
    pub code: String,
    pub index: usize,
}

impl LanguageId {
    pub fn new(code: impl Into<String>, index: usize) -> Self {
        Self { code: code.into(), index }
    }
}

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.code)
    }
}

/// Donor reference and per-site gates of a two-expert entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub donor: String,
    pub gates: Vec<MoeGate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub language: LanguageId,
    pub rank: usize,
    /// One adapter per policy site, in policy order.
    pub adapters: Vec<LoraAdapter>,
    pub mixture: Option<Mixture>,
}

impl BankEntry {
    pub fn plain(language: LanguageId, adapters: Vec<LoraAdapter>) -> Self {
        let rank = adapters.first().map_or(0, |a| a.rank);
        Self { language, rank, adapters, mixture: None }
    }

    pub fn num_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::num_params).sum::<usize>()
            + self.mixture.as_ref().map_or(0, |m| 2 * m.gates.len())
    }

    pub fn snap_to_f32(&mut self) {
        for a in &mut self.adapters {
            a.snap_to_f32();
        }
        if let Some(m) = &mut self.mixture {
            for g in &mut m.gates {
                g.logits.snap_to_f32();
            }
        }
    }
}

/// Mapping from language to a complete adapter set over one frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    policy: AttachmentPolicy,
    dims: ModelDims,
    base_fingerprint: [u8; 32],
    entries: Vec<BankEntry>,
}

impl AdapterBank {
    pub fn new(policy: AttachmentPolicy, dims: ModelDims, base_fingerprint: [u8; 32]) -> Self {
        Self { policy, dims, base_fingerprint, entries: Vec::new() }
    }

    pub fn policy(&self) -> &AttachmentPolicy {
        &self.policy
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn base_fingerprint(&self) -> &[u8; 32] {
        &self.base_fingerprint
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.entries.iter().map(|e| &e.language)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.entry(code).is_some()
    }

    pub fn entry(&self, code: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.language.code == code)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(BankEntry::num_params).sum()
    }

    fn check_entry(&self, entry: &BankEntry) -> Result<()> {
        let sites = self.policy.sites(&self.dims);
        if entry.adapters.len() != sites.len() {
            return Err(Error::Contract(format!(
                "entry {} has {} adapters, policy has {} sites",
                entry.language,
                entry.adapters.len(),
                sites.len()
            )));
        }
        for (ad, site) in entry.adapters.iter().zip(&sites) {
            if ad.site != *site {
                return Err(Error::Contract(format!("entry {}: expected site {site}, found {}", entry.language, ad.site)));
            }
            if ad.rank != entry.rank {
                return Err(Error::Contract(format!("entry {}: mixed ranks {} and {}", entry.language, entry.rank, ad.rank)));
            }
            ad.validate()?;
        }
        if let Some(m) = &entry.mixture {
            if m.gates.len() != sites.len() {
                return Err(Error::Contract(format!("entry {}: {} gates for {} sites", entry.language, m.gates.len(), sites.len())));
            }
            for g in &m.gates {
                g.validate()?;
            }
            let donor = self.entry(&m.donor).ok_or_else(|| Error::Routing(m.donor.clone()))?;
            if donor.mixture.is_some() {
                return Err(Error::Contract(format!("donor {} is itself a mixture", m.donor)));
            }
        }
        Ok(())
    }

    /// Adds a new language. Existing entries are untouched.
    pub fn add_language(&mut self, entry: BankEntry) -> Result<()> {
        if self.contains(&entry.language.code) {
            return Err(Error::Conflict(entry.language.code.clone()));
        }
        if self.entries.iter().any(|e| e.language.index == entry.language.index) {
            return Err(Error::Conflict(format!("{} (index {})", entry.language.code, entry.language.index)));
        }
        self.check_entry(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn remove_language(&mut self, code: &str) -> Result<BankEntry> {
        let pos = self.entries.iter().position(|e| e.language.code == code).ok_or_else(|| Error::Routing(code.into()))?;
        if let Some(dep) = self.entries.iter().find(|e| e.mixture.as_ref().is_some_and(|m| m.donor == code)) {
            return Err(Error::Contract(format!("{code} is the donor of {}", dep.language)));
        }
        Ok(self.entries.remove(pos))
    }

    /// Binds exactly `code`'s adapters to their sites (plus the donor's, for
    /// a mixture entry). Unknown languages are an error, never the bare base.
    pub fn route(&self, code: &str) -> Result<Selection<'_>> {
        let entry = self.entry(code).ok_or_else(|| Error::Routing(code.into()))?;
        let donor = match &entry.mixture {
            Some(m) => Some(self.entry(&m.donor).ok_or_else(|| Error::Routing(m.donor.clone()))?),
            None => None,
        };
        entry_selection(&self.dims, entry, donor)
    }

    /// Serialized bytes of one entry, checksum included.
    pub fn entry_bytes(&self, code: &str) -> Result<Vec<u8>> {
        let e = self.entry(code).ok_or_else(|| Error::Routing(code.into()))?;
        Ok(format::encode_entry(e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode_bank(self)
    }

    pub fn from_bytes(bytes: &[u8], expected_base: Option<&[u8; 32]>) -> Result<Self> {
        format::decode_bank(bytes, expected_base)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads and verifies checksums and, when given, the base fingerprint.
    pub fn load(path: impl AsRef<std::path::Path>, expected_base: Option<&[u8; 32]>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_base)
    }

    /// SHA-256 over the serialized bank.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn manifest(&self, provenance: Provenance) -> BankManifest {
        BankManifest::describe(self, provenance)
    }
}

/// Selection for an entry that need not be in a bank yet. `donor` must be
/// given exactly when the entry is a mixture.
pub(crate) fn entry_selection<'a>(
    dims: &ModelDims,
    entry: &'a BankEntry,
    donor: Option<&'a BankEntry>,
) -> Result<Selection<'a>> {
    let pair = match (&entry.mixture, donor) {
        (None, _) => None,
        (Some(m), Some(d)) if d.language.code == m.donor && d.adapters.len() == entry.adapters.len() => Some((d, m)),
        (Some(m), _) => return Err(Error::Routing(m.donor.clone())),
    };
    let mut slots = vec![None; dims.num_slots()];
    for (i, ad) in entry.adapters.iter().enumerate() {
        let s = dims
            .slot(ad.site.layer, ad.site.component, ad.site.matrix)
            .ok_or_else(|| Error::Contract(format!("site {} not in model", ad.site)))?;
        slots[s] = Some(match pair {
            None => SiteBinding::Lora(ad),
            Some((d, m)) => {
                if d.adapters[i].site != ad.site {
                    return Err(Error::Dimension(format!("donor site {} against {}", d.adapters[i].site, ad.site)));
                }
                SiteBinding::Mixture { new: ad, donor: &d.adapters[i], gate: &m.gates[i] }
            }
        });
    }
    Ok(Selection::new(entry.language.code.clone(), slots))
}
