// Container layout (little-endian):
//
//   magic "LWBK" | version u16 | tag (u8 len + ASCII: "bank" or "base")
//
// bank body:
//   base_fingerprint [32]
//   dims: d_model u32, ffn_dim u32, n_enc u32, n_dec u32
//   policy: n u16, then (component u8, matrix u8) * n
//   entry count u32 | crc32 of everything above
//   entries:
//     code (u16 len + UTF-8) | index u32 | rank u16 | scaling f32
//     kind u8 (0 plain, 1 mixture) | [donor code (u16 len + UTF-8)]
//     site count u32, then per site:
//       layer u16 | component u8 | matrix u8 | d1 u32 | d2 u32
//       A (r*d2 f32, row-major) | B (d1*r f32, row-major) | [gate logits 2 f32]
//       crc32 of the site record
//     crc32 of the whole entry
//
// base body:
//   config JSON (u32 len) | tensor count u32 | crc32 of everything above
//   per tensor:
//     name (u16 len + UTF-8) | rows u32 | cols u32 | f32 data | crc32

use serde::{Deserialize, Serialize};

use crate::bank::{AdapterBank, BankEntry, LanguageId, Mixture};
use crate::error::{Error, Result};
use crate::expansion::MoeGate;
use crate::lora::{AttachmentPolicy, AttachmentSite, Component, LoraAdapter, Matrix, ModelDims};
use crate::model::{BaseWeights, ModelConfig};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LWBK";
pub const FORMAT_VERSION: u16 = 1;
const TAG_BANK: &str = "bank";
const TAG_BASE: &str = "base";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn header(&mut self, tag: &str) {
        self.0.extend_from_slice(MAGIC);
        self.u16(FORMAT_VERSION);
        self.u8(tag.len() as u8);
        self.0.extend_from_slice(tag.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Tensor::from_vec(rows, cols, data)
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn header(&mut self, tag: &str) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let n = self.u8()? as usize;
        let found = self.take(n)?;
        if found != tag.as_bytes() {
            return Err(Error::Format(format!("expected a {tag} file, found tag {:?}", String::from_utf8_lossy(found))));
        }
        Ok(())
    }
    /// Checks the CRC that follows everything read so far.
    fn header_crc(&mut self) -> Result<()> {
        let computed = crc32fast::hash(&self.buf[..self.pos]);
        if computed != self.u32()? {
            return Err(Error::Checksum { lang: "header".into(), site: None });
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_site(w: &mut Writer, ad: &LoraAdapter, gate: Option<&MoeGate>) {
    let start = w.0.len();
    w.u16(ad.site.layer as u16);
    w.u8(ad.site.component.code());
    w.u8(ad.site.matrix.code());
    w.u32(ad.site.d_out as u32);
    w.u32(ad.site.d_in as u32);
    w.f32s(&ad.a);
    w.f32s(&ad.b);
    if let Some(g) = gate {
        w.f32s(&g.logits);
    }
    let crc = crc32fast::hash(&w.0[start..]);
    w.u32(crc);
}

pub(crate) fn encode_entry(e: &BankEntry) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.str16(&e.language.code);
    w.u32(e.language.index as u32);
    w.u16(e.rank as u16);
    let scaling = e.adapters.first().map_or(1.0, |a| a.scaling);
    w.0.extend_from_slice(&(scaling as f32).to_le_bytes());
    match &e.mixture {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            w.str16(&m.donor);
        }
    }
    w.u32(e.adapters.len() as u32);
    for (i, ad) in e.adapters.iter().enumerate() {
        encode_site(&mut w, ad, e.mixture.as_ref().map(|m| &m.gates[i]));
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

fn decode_entry(r: &mut Reader<'_>) -> Result<BankEntry> {
    let start = r.pos;
    let code = r.str16()?;
    let index = r.u32()? as usize;
    let rank = r.u16()? as usize;
    let scaling = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
    let kind = r.u8()?;
    let donor = match kind {
        0 => None,
        1 => Some(r.str16()?),
        k => return Err(Error::Checksum { lang: code, site: Some(format!("entry kind byte {k}")) }),
    };
    let n_sites = r.u32()? as usize;
    let mut adapters = Vec::with_capacity(n_sites.min(1 << 16));
    let mut gates = Vec::new();
    for i in 0..n_sites {
        let site_start = r.pos;
        let layer = r.u16()? as usize;
        let (c, m) = (r.u8()?, r.u8()?);
        let d_out = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let a = r.f32s(rank, d_in)?;
        let b = r.f32s(d_out, rank)?;
        let gate = if donor.is_some() { Some(r.f32s(1, 2)?) } else { None };
        let computed = crc32fast::hash(&r.buf[site_start..r.pos]);
        let stored = r.u32()?;
        let (component, matrix) = (Component::from_code(c), Matrix::from_code(m));
        if computed != stored || component.is_none() || matrix.is_none() {
            let site = match (component, matrix) {
                (Some(component), Some(matrix)) => AttachmentSite { layer, component, matrix, d_out, d_in }.to_string(),
                _ => format!("#{i}"),
            };
            return Err(Error::Checksum { lang: code, site: Some(site) });
        }
        let site = AttachmentSite { layer, component: component.unwrap(), matrix: matrix.unwrap(), d_out, d_in };
        adapters.push(LoraAdapter { site, rank, a, b, scaling });
        if let Some(g) = gate {
            gates.push(MoeGate { logits: g });
        }
    }
    let computed = crc32fast::hash(&r.buf[start..r.pos]);
    if computed != r.u32()? {
        return Err(Error::Checksum { lang: code, site: None });
    }
    let mixture = donor.map(|donor| Mixture { donor, gates });
    Ok(BankEntry { language: LanguageId { code, index }, rank, adapters, mixture })
}

pub(crate) fn encode_bank(bank: &AdapterBank) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.header(TAG_BANK);
    w.0.extend_from_slice(&bank.base_fingerprint);
    for d in [bank.dims.d_model, bank.dims.ffn_dim, bank.dims.n_enc_layers, bank.dims.n_dec_layers] {
        w.u32(d as u32);
    }
    w.u16(bank.policy.targets().len() as u16);
    for &(c, m) in bank.policy.targets() {
        w.u8(c.code());
        w.u8(m.code());
    }
    w.u32(bank.entries.len() as u32);
    w.u32(crc32fast::hash(&w.0));
    for e in &bank.entries {
        w.0.extend_from_slice(&encode_entry(e));
    }
    w.0
}

pub(crate) fn decode_bank(bytes: &[u8], expected_base: Option<&[u8; 32]>) -> Result<AdapterBank> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(TAG_BANK)?;
    let fp: [u8; 32] = r.take(32)?.try_into().unwrap();
    let dims = ModelDims {
        d_model: r.u32()? as usize,
        ffn_dim: r.u32()? as usize,
        n_enc_layers: r.u32()? as usize,
        n_dec_layers: r.u32()? as usize,
    };
    let n_targets = r.u16()? as usize;
    let mut codes = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        codes.push((r.u8()?, r.u8()?));
    }
    let n = r.u32()? as usize;
    r.header_crc()?;
    if let Some(expected) = expected_base {
        if &fp != expected {
            return Err(Error::Fingerprint { expected: hex::encode(fp), actual: hex::encode(expected) });
        }
    }
    let mut targets = Vec::with_capacity(n_targets);
    for (c, m) in codes {
        match (Component::from_code(c), Matrix::from_code(m)) {
            (Some(c), Some(m)) => targets.push((c, m)),
            _ => return Err(Error::Format(format!("bad policy target ({c}, {m})"))),
        }
    }
    let policy = AttachmentPolicy::new(targets)?;
    let mut bank = AdapterBank::new(policy, dims, fp);
    for _ in 0..n {
        let e = decode_entry(&mut r)?;
        bank.add_language(e)?;
    }
    r.done()?;
    Ok(bank)
}

pub fn save_base(base: &BaseWeights, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, encode_base(base))?;
    Ok(())
}

pub fn load_base(path: impl AsRef<std::path::Path>) -> Result<BaseWeights> {
    decode_base(&std::fs::read(path)?)
}

pub(crate) fn encode_base(base: &BaseWeights) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.header(TAG_BASE);
    let cfg = serde_json::to_vec(base.config()).expect("config serializes");
    w.u32(cfg.len() as u32);
    w.0.extend_from_slice(&cfg);
    w.u32(base.num_tensors() as u32);
    w.u32(crc32fast::hash(&w.0));
    for (name, t) in base.named_tensors() {
        let start = w.0.len();
        w.str16(name);
        w.u32(t.rows() as u32);
        w.u32(t.cols() as u32);
        w.f32s(t);
        let crc = crc32fast::hash(&w.0[start..]);
        w.u32(crc);
    }
    w.0
}

pub(crate) fn decode_base(bytes: &[u8]) -> Result<BaseWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(TAG_BASE)?;
    let n = r.u32()? as usize;
    let config = r.take(n)?;
    let count = r.u32()? as usize;
    r.header_crc()?;
    let config: ModelConfig = serde_json::from_slice(config)?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos;
        let name = r.str16()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let t = r.f32s(rows, cols)?;
        if crc32fast::hash(&r.buf[start..r.pos]) != r.u32()? {
            return Err(Error::Checksum { lang: "base".into(), site: Some(name) });
        }
        named.push((name, t));
    }
    r.done()?;
    BaseWeights::from_tensors(config, named)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLanguage {
    pub code: String,
    pub index: usize,
    pub rank: usize,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub donor: Option<String>,
    pub params: usize,
}

/// JSON sidecar describing a bank file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format_version: u16,
    pub base_fingerprint: String,
    pub dims: ModelDims,
    pub policy: Vec<(Component, Matrix)>,
    pub languages: Vec<ManifestLanguage>,
    pub provenance: Provenance,
}

impl BankManifest {
    pub(crate) fn describe(bank: &AdapterBank, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            base_fingerprint: hex::encode(bank.base_fingerprint),
            dims: bank.dims,
            policy: bank.policy.targets().to_vec(),
            languages: bank
                .entries
                .iter()
                .map(|e| ManifestLanguage {
                    code: e.language.code.clone(),
                    index: e.language.index,
                    rank: e.rank,
                    kind: if e.mixture.is_some() { "moe".into() } else { "lora".into() },
                    donor: e.mixture.as_ref().map(|m| m.donor.clone()),
                    params: e.num_params(),
                })
                .collect(),
            provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::tests::tiny_bank;
    use crate::lora::init_scratch;

    fn filled_bank() -> AdapterBank {
        let mut bank = tiny_bank();
        for (i, code) in ["L1", "L2"].iter().enumerate() {
            let adapters: Vec<_> = bank
                .policy()
                .sites(bank.dims())
                .into_iter()
                .map(|s| {
                    let mut a = init_scratch(s, 2, i as u64).unwrap();
                    // nonzero B so the payload is not trivially zero
                    let n = a.b.len();
                    a.b = Tensor::from_vec(a.b.rows(), a.b.cols(), (0..n).map(|k| (k as f64 - 3.0) * 0.125).collect()).unwrap();
                    a
                })
                .collect();
            bank.add_language(BankEntry::plain(LanguageId::new(*code, i), adapters)).unwrap();
        }
        bank
    }

    #[test]
    fn empty_bank_round_trips() {
        let bank = tiny_bank();
        let back = AdapterBank::from_bytes(&bank.to_bytes(), Some(&[7; 32])).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn populated_bank_round_trips_bytes() {
        let bank = filled_bank();
        let bytes = bank.to_bytes();
        let back = AdapterBank::from_bytes(&bytes, None).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_payload_names_language_and_site() {
        let bank = filled_bank();
        let mut bytes = bank.to_bytes();
        // last entry's final site payload sits just before its two CRCs
        let idx = bytes.len() - 8 - 3;
        bytes[idx] ^= 0x40;
        match AdapterBank::from_bytes(&bytes, None) {
            Err(Error::Checksum { lang, site: Some(site) }) => {
                assert_eq!(lang, "L2");
                assert!(site.contains("dec_mlp"), "{site}");
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_and_version_errors_are_distinct() {
        let bank = filled_bank();
        let bytes = bank.to_bytes();
        assert!(matches!(AdapterBank::from_bytes(&bytes, Some(&[0; 32])), Err(Error::Fingerprint { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(AdapterBank::from_bytes(&v, None), Err(Error::Version { found: 9, .. })));
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(AdapterBank::from_bytes(&m, None), Err(Error::Format(_))));
        assert!(matches!(AdapterBank::from_bytes(&bytes[..bytes.len() - 1], None), Err(Error::Format(_))));
    }

    #[test]
    fn base_checkpoint_round_trips() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, ffn_dim: 16, vocab_size: 24, ..Default::default() };
        let base = BaseWeights::init(cfg, 1).unwrap();
        let bytes = encode_base(&base);
        let back = decode_base(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(back.fingerprint(), base.fingerprint());
        assert!(matches!(AdapterBank::from_bytes(&bytes, None), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 1;
        assert!(matches!(decode_base(&bad), Err(Error::Checksum { .. })));
    }
}
