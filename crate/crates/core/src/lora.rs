//! Low-rank adapters: attachment sites, initialization, the modified forward
//! `y = (W + s·B·A)x + b`, and parameter accounting.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    EncSelf,
    DecSelf,
    DecCross,
    EncMlp,
    DecMlp,
}

impl Component {
    pub const ALL: [Component; 5] =
        [Component::EncSelf, Component::DecSelf, Component::DecCross, Component::EncMlp, Component::DecMlp];

    pub fn is_attention(self) -> bool {
        matches!(self, Component::EncSelf | Component::DecSelf | Component::DecCross)
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Component::EncSelf | Component::EncMlp)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    fn name(self) -> &'static str {
        match self {
            Component::EncSelf => "enc_self",
            Component::DecSelf => "dec_self",
            Component::DecCross => "dec_cross",
            Component::EncMlp => "enc_mlp",
            Component::DecMlp => "dec_mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl Matrix {
    pub const ALL: [Matrix; 6] = [Matrix::Q, Matrix::K, Matrix::V, Matrix::O, Matrix::Fc1, Matrix::Fc2];
    pub const ATTENTION: [Matrix; 4] = [Matrix::Q, Matrix::K, Matrix::V, Matrix::O];

    pub fn is_attention(self) -> bool {
        !matches!(self, Matrix::Fc1 | Matrix::Fc2)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    fn name(self) -> &'static str {
        match self {
            Matrix::Q => "W_q",
            Matrix::K => "W_k",
            Matrix::V => "W_v",
            Matrix::O => "W_o",
            Matrix::Fc1 => "W_fc1",
            Matrix::Fc2 => "W_fc2",
        }
    }
}

/// The dimensions that determine which matrices exist and how large they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
}

const ENC_SLOTS: usize = 6;
const DEC_SLOTS: usize = 10;

impl ModelDims {
    pub fn whisper_small() -> Self {
        Self { d_model: 768, ffn_dim: 3072, n_enc_layers: 12, n_dec_layers: 12 }
    }

    pub fn num_slots(&self) -> usize {
        self.n_enc_layers * ENC_SLOTS + self.n_dec_layers * DEC_SLOTS
    }

    /// Dense index of a linear map among all of the model's linear maps. The
    /// order is the one produced by [`ModelDims::all_sites`].
    pub fn slot(&self, layer: usize, component: Component, matrix: Matrix) -> Option<usize> {
        let attn = |m: Matrix| Matrix::ATTENTION.iter().position(|&x| x == m);
        let mlp = |m: Matrix| match m {
            Matrix::Fc1 => Some(0),
            Matrix::Fc2 => Some(1),
            _ => None,
        };
        let (base, local) = match component {
            Component::EncSelf if layer < self.n_enc_layers => (layer * ENC_SLOTS, attn(matrix)?),
            Component::EncMlp if layer < self.n_enc_layers => (layer * ENC_SLOTS, 4 + mlp(matrix)?),
            Component::DecSelf | Component::DecCross | Component::DecMlp if layer < self.n_dec_layers => {
                let base = self.n_enc_layers * ENC_SLOTS + layer * DEC_SLOTS;
                let local = match component {
                    Component::DecSelf => attn(matrix)?,
                    Component::DecCross => 4 + attn(matrix)?,
                    _ => 8 + mlp(matrix)?,
                };
                (base, local)
            }
            _ => return None,
        };
        Some(base + local)
    }

    pub fn all_sites(&self) -> Vec<AttachmentSite> {
        let d = self.d_model;
        let f = self.ffn_dim;
        let attn = |layer, component| {
            Matrix::ATTENTION.map(|matrix| AttachmentSite { layer, component, matrix, d_out: d, d_in: d })
        };
        let mlp = |layer, component| {
            [
                AttachmentSite { layer, component, matrix: Matrix::Fc1, d_out: f, d_in: d },
                AttachmentSite { layer, component, matrix: Matrix::Fc2, d_out: d, d_in: f },
            ]
        };
        let mut out = Vec::with_capacity(self.num_slots());
        for l in 0..self.n_enc_layers {
            out.extend(attn(l, Component::EncSelf));
            out.extend(mlp(l, Component::EncMlp));
        }
        for l in 0..self.n_dec_layers {
            out.extend(attn(l, Component::DecSelf));
            out.extend(attn(l, Component::DecCross));
            out.extend(mlp(l, Component::DecMlp));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttachmentSite {
    pub layer: usize,
    pub component: Component,
    pub matrix: Matrix,
    pub d_out: usize,
    pub d_in: usize,
}

impl AttachmentSite {
    pub fn validate(&self) -> Result<()> {
        if self.component.is_attention() != self.matrix.is_attention() {
            return Err(Error::Contract(format!("{} cannot carry {}", self.component.name(), self.matrix.name())));
        }
        Ok(())
    }

    fn stream_id(&self) -> u64 {
        ((self.layer as u64) << 16) | ((self.component.code() as u64) << 8) | self.matrix.code() as u64
    }
}

impl fmt::Display for AttachmentSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}].{}", self.component.name(), self.layer, self.matrix.name())
    }
}

/// Which `(component, matrix)` kinds receive an adapter, in every layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentPolicy {
    targets: Vec<(Component, Matrix)>,
}

impl AttachmentPolicy {
    pub fn new(mut targets: Vec<(Component, Matrix)>) -> Result<Self> {
        targets.sort();
        targets.dedup();
        for &(c, m) in &targets {
            if c.is_attention() != m.is_attention() {
                return Err(Error::Contract(format!("{} cannot carry {}", c.name(), m.name())));
            }
        }
        Ok(Self { targets })
    }

    /// `W_q, W_k, W_v, W_o` in every attention block plus both MLP matrices.
    pub fn full() -> Self {
        let mut t = Vec::new();
        for c in [Component::EncSelf, Component::DecSelf, Component::DecCross] {
            t.extend(Matrix::ATTENTION.iter().map(|&m| (c, m)));
        }
        for c in [Component::EncMlp, Component::DecMlp] {
            t.push((c, Matrix::Fc1));
            t.push((c, Matrix::Fc2));
        }
        Self::new(t).expect("static policy is valid")
    }

    /// `W_q, W_k, W_v` in every attention block plus the first MLP matrix.
    pub fn qkv_fc1() -> Self {
        let mut t = Vec::new();
        for c in [Component::EncSelf, Component::DecSelf, Component::DecCross] {
            t.extend([Matrix::Q, Matrix::K, Matrix::V].iter().map(|&m| (c, m)));
        }
        t.push((Component::EncMlp, Matrix::Fc1));
        t.push((Component::DecMlp, Matrix::Fc1));
        Self::new(t).expect("static policy is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "qkv-fc1" => Ok(Self::qkv_fc1()),
            other => Err(Error::Validation(format!("unknown attachment policy {other:?} (expected full or qkv-fc1)"))),
        }
    }

    pub fn targets(&self) -> &[(Component, Matrix)] {
        &self.targets
    }

    pub fn covers(&self, component: Component, matrix: Matrix) -> bool {
        self.targets.binary_search(&(component, matrix)).is_ok()
    }

    pub fn sites(&self, dims: &ModelDims) -> Vec<AttachmentSite> {
        dims.all_sites().into_iter().filter(|s| self.covers(s.component, s.matrix)).collect()
    }
}

/// `ΔW = scaling · B · A` at one site; `A` is `r x d_in`, `B` is `d_out x r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub site: AttachmentSite,
    pub rank: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

pub fn check_rank(site: &AttachmentSite, rank: usize) -> Result<()> {
    if rank == 0 || rank >= site.d_out.min(site.d_in) {
        return Err(Error::Rank { rank, d_out: site.d_out, d_in: site.d_in });
    }
    Ok(())
}

/// Fresh adapter with `A ~ U(±1/√d_in)` and `B = 0`, so `ΔW = 0` exactly.
/// Values are rounded to `f32` so the adapter persists losslessly.
pub fn init_scratch(site: AttachmentSite, rank: usize, seed: u64) -> Result<LoraAdapter> {
    site.validate()?;
    check_rank(&site, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site.stream_id());
    let bound = 1.0 / (site.d_in as f64).sqrt();
    let data: Vec<f64> = (0..rank * site.d_in).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
    Ok(LoraAdapter {
        site,
        rank,
        a: Tensor::from_vec(rank, site.d_in, data)?,
        b: Tensor::zeros(site.d_out, rank),
        // alpha = r
        scaling: 1.0,
    })
}

impl LoraAdapter {
    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.site.validate()?;
        check_rank(&self.site, self.rank)?;
        if self.a.shape() != [self.rank, self.site.d_in] || self.b.shape() != [self.site.d_out, self.rank] {
            return dim_err(format!(
                "adapter at {} has A {:?} and B {:?} for rank {}",
                self.site,
                self.a.shape(),
                self.b.shape(),
                self.rank
            ));
        }
        Ok(())
    }

    /// Dense `scaling · B · A`. Only for inspection and test oracles.
    pub fn materialize_delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("adapter shapes are consistent").scale(self.scaling)
    }

    pub fn snap_to_f32(&mut self) {
        self.a.snap_to_f32();
        self.b.snap_to_f32();
    }
}

/// Tape handles for the delta applied at one linear map.
#[derive(Clone, Copy, Debug)]
pub enum SiteVars {
    Lora { a: Var, b: Var, scaling: f64 },
    /// Two experts mixed with `1 x 1` weights `w_new`, `w_donor`.
    Mixture { new: (Var, Var, f64), donor: (Var, Var, f64), w_new: Var, w_donor: Var },
}

fn low_rank_term(tape: &mut Tape<'_>, x: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let ax = tape.matmul_t(x, a)?;
    let bax = tape.matmul_t(ax, b)?;
    tape.scale(bax, scaling)
}

/// `x W^T + b` plus the site's low-rank delta, never materializing `ΔW`.
/// `x` holds one input vector per row.
pub fn linear_on_tape(tape: &mut Tape<'_>, x: Var, w: Var, bias: Var, site: Option<&SiteVars>) -> Result<Var> {
    let xw = tape.matmul_t(x, w)?;
    let y = tape.add_row(xw, bias)?;
    match site {
        None => Ok(y),
        Some(&SiteVars::Lora { a, b, scaling }) => {
            let d = low_rank_term(tape, x, a, b, scaling)?;
            tape.add(y, d)
        }
        Some(&SiteVars::Mixture { new, donor, w_new, w_donor }) => {
            let dn = low_rank_term(tape, x, new.0, new.1, new.2)?;
            let dn = tape.scale_var(dn, w_new)?;
            let y = tape.add(y, dn)?;
            let dd = low_rank_term(tape, x, donor.0, donor.1, donor.2)?;
            let dd = tape.scale_var(dd, w_donor)?;
            tape.add(y, dd)
        }
    }
}

fn check_site_shapes(x: &Tensor, w: &Tensor, b: &Tensor, site: &AttachmentSite) -> Result<()> {
    if w.shape() != [site.d_out, site.d_in] || b.shape() != [1, site.d_out] || x.cols() != site.d_in {
        return dim_err(format!(
            "site {} ({}x{}) with W {:?}, b {:?}, x {:?}",
            site,
            site.d_out,
            site.d_in,
            w.shape(),
            b.shape(),
            x.shape()
        ));
    }
    Ok(())
}

/// `y = (W + s·B·A) x + b` for each row `x` of `x`, computed as
/// `W x + s·B (A x) + b`.
pub fn lora_forward(x: &Tensor, w: &Tensor, b: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.validate()?;
    check_site_shapes(x, w, b, &adapter.site)?;
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let site = SiteVars::Lora { a: tape.constant(&adapter.a), b: tape.constant(&adapter.b), scaling: adapter.scaling };
    let y = linear_on_tape(&mut tape, xv, wv, bv, Some(&site))?;
    Ok(tape.to_tensor(y))
}

/// Number of singular values of `ΔW` above `tol · σ₁`.
///
/// Uses `B = Q_B R_B`, `Aᵀ = Q_A R_A`, so `ΔW = Q_B (s R_B R_Aᵀ) Q_Aᵀ` and
/// only an `r x r` core needs an SVD.
pub fn effective_rank(adapter: &LoraAdapter, tol: f64) -> usize {
    let r = adapter.rank;
    let b = DMatrix::from_row_slice(adapter.b.rows(), r, adapter.b.data());
    let at = DMatrix::from_row_slice(r, adapter.a.cols(), adapter.a.data()).transpose();
    let rb = b.qr().r();
    let ra = at.qr().r();
    let core = rb * ra.transpose() * adapter.scaling;
    let sv = core.svd(false, false).singular_values;
    let s1 = sv.iter().cloned().fold(0.0, f64::max);
    if s1 == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * s1).count()
}

/// `Σ r·(d_out + d_in)` over the policy's sites.
pub fn count_lora_params(dims: &ModelDims, rank: usize, policy: &AttachmentPolicy) -> usize {
    policy.sites(dims).iter().map(|s| rank * (s.d_out + s.d_in)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(d_out: usize, d_in: usize) -> AttachmentSite {
        AttachmentSite { layer: 0, component: Component::EncSelf, matrix: Matrix::Q, d_out, d_in }
    }

    #[test]
    fn scratch_init_is_zero_delta_and_seeded() {
        let s = site(8, 6);
        let a1 = init_scratch(s, 2, 11).unwrap();
        let a2 = init_scratch(s, 2, 11).unwrap();
        let a3 = init_scratch(s, 2, 12).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1.a, a3.a);
        assert!(a1.b.data().iter().all(|&v| v == 0.0));
        assert!(a3.b.data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(a1.a.data().iter().all(|v| v.abs() <= bound));
        assert!(a1.a.is_f32_exact());
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let s = site(8, 4);
        assert!(matches!(init_scratch(s, 4, 0), Err(Error::Rank { .. })));
        assert!(matches!(init_scratch(s, 0, 0), Err(Error::Rank { .. })));
        assert!(init_scratch(s, 3, 0).is_ok());
    }

    #[test]
    fn hand_computed_delta() {
        let s = site(2, 2);
        let adapter = LoraAdapter {
            site: s,
            rank: 1,
            a: Tensor::from_vec(1, 2, vec![0.0, 1.0]).unwrap(),
            b: Tensor::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            scaling: 1.0,
        };
        let x = Tensor::row_vector(vec![3.0, 7.0]);
        let y = lora_forward(&x, &Tensor::zeros(2, 2), &Tensor::zeros(1, 2), &adapter).unwrap();
        assert_eq!(y.data(), &[7.0, 0.0]);
        assert_eq!(effective_rank(&adapter, 1e-8), 1);
    }

    #[test]
    fn zero_b_gives_plain_linear() {
        let s = site(3, 4);
        let adapter = init_scratch(s, 2, 5).unwrap();
        let w = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let b = Tensor::row_vector(vec![0.1, -0.2, 0.3]);
        let x = Tensor::from_vec(2, 4, vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0, -2.0, 1.0]).unwrap();
        let y = lora_forward(&x, &w, &b, &adapter).unwrap();
        let mut plain = x.matmul(&w.transpose()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                plain.data_mut()[i * 3 + j] += b.data()[j];
            }
        }
        assert_eq!(y, plain);
        assert_eq!(effective_rank(&adapter, 1e-8), 0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let adapter = init_scratch(site(3, 4), 1, 0).unwrap();
        let r = lora_forward(&Tensor::zeros(1, 3), &Tensor::zeros(3, 4), &Tensor::zeros(1, 3), &adapter);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn policy_rejects_mismatched_kinds() {
        assert!(AttachmentPolicy::new(vec![(Component::EncMlp, Matrix::Q)]).is_err());
        assert!(AttachmentSite { layer: 0, component: Component::DecCross, matrix: Matrix::Fc2, d_out: 4, d_in: 4 }
            .validate()
            .is_err());
    }

    #[test]
    fn slots_follow_all_sites_order() {
        let dims = ModelDims { d_model: 8, ffn_dim: 16, n_enc_layers: 2, n_dec_layers: 3 };
        for (i, s) in dims.all_sites().iter().enumerate() {
            assert_eq!(dims.slot(s.layer, s.component, s.matrix), Some(i));
        }
        assert_eq!(dims.slot(2, Component::EncSelf, Matrix::Q), None);
        assert_eq!(dims.slot(0, Component::EncMlp, Matrix::Q), None);
    }

    #[test]
    fn single_site_count() {
        let s = site(64, 64);
        assert_eq!(init_scratch(s, 4, 0).unwrap().num_params(), 512);
    }

    #[test]
    fn whisper_small_counts() {
        let dims = ModelDims::whisper_small();
        let full = AttachmentPolicy::full();
        assert_eq!(count_lora_params(&dims, 1, &full), 405_504);
        assert_eq!(count_lora_params(&dims, 8, &full), 3_244_032);
        assert_eq!(count_lora_params(&dims, 32, &full), 12_976_128);
        // q, k, v in three attention kinds plus fc1
        let alt = AttachmentPolicy::qkv_fc1();
        let per_rank = 12 * (3 * 1536 + 3840) + 12 * (6 * 1536 + 3840);
        assert_eq!(count_lora_params(&dims, 1, &alt), per_rank);
    }
}
