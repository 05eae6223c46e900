//! Encoder and decoder forward passes recorded on a [`Tape`].

use crate::error::{dim_err, Error, Result};
use crate::expansion::MoeGate;
use crate::lora::{linear_on_tape, Component, LoraAdapter, Matrix, SiteVars};
use crate::model::config::{ModelConfig, Token};
use crate::model::weights::{AttnIdx, BaseLayout, BaseWeights, LinearIdx, NormIdx};
use crate::numerics::{Tape, Tensor, Var};

/// The adapter (or adapter pair) bound to one linear map.
#[derive(Clone, Copy, Debug)]
pub enum SiteBinding<'a> {
    Lora(&'a LoraAdapter),
    Mixture { new: &'a LoraAdapter, donor: &'a LoraAdapter, gate: &'a MoeGate },
}

/// A routing handle: for every linear map of the model, the binding that
/// applies, if any. The empty selection is the plain base model.
#[derive(Clone, Debug)]
pub struct Selection<'a> {
    language: Option<String>,
    slots: Vec<Option<SiteBinding<'a>>>,
}

impl<'a> Selection<'a> {
    pub fn base() -> Self {
        Self { language: None, slots: Vec::new() }
    }

    pub(crate) fn new(language: String, slots: Vec<Option<SiteBinding<'a>>>) -> Self {
        Self { language: Some(language), slots }
    }

    pub fn language(&self) -> Option<&str> {
        self.language.as_deref()
    }

    pub fn slot(&self, i: usize) -> Option<&SiteBinding<'a>> {
        self.slots.get(i).and_then(Option::as_ref)
    }

    pub fn bound_sites(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_base(&self) -> bool {
        self.bound_sites() == 0
    }
}

/// Parameter identity on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    Base(usize),
    AdapterA(usize),
    AdapterB(usize),
    Gate(usize),
}

impl ParamRef {
    pub fn id(self, n_base: usize) -> usize {
        match self {
            ParamRef::Base(i) => i,
            ParamRef::AdapterA(s) => n_base + 3 * s,
            ParamRef::AdapterB(s) => n_base + 3 * s + 1,
            ParamRef::Gate(s) => n_base + 3 * s + 2,
        }
    }

    pub fn from_id(id: usize, n_base: usize) -> Self {
        if id < n_base {
            return ParamRef::Base(id);
        }
        let r = id - n_base;
        match r % 3 {
            0 => ParamRef::AdapterA(r / 3),
            1 => ParamRef::AdapterB(r / 3),
            _ => ParamRef::Gate(r / 3),
        }
    }
}

/// Which of the bound values become trainable tape parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub base: bool,
    /// The selected language's own adapters (the `new` expert of a mixture).
    pub adapters: bool,
    pub gates: bool,
}

pub(crate) struct Bound {
    base: Vec<Var>,
    sites: Vec<Option<SiteVars>>,
}

pub(crate) fn bind<'p>(
    tape: &mut Tape<'p>,
    base: &'p BaseWeights,
    sel: &Selection<'p>,
    trainable: Trainable,
) -> Result<Bound> {
    let n_base = base.tensors.len();
    let base_vars = base
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| if trainable.base { tape.param(t, ParamRef::Base(i).id(n_base)) } else { tape.constant(t) })
        .collect();
    let n_slots = base.config.dims().num_slots();
    if sel.slots.len() > n_slots {
        return Err(Error::Contract(format!("selection has {} slots, model has {n_slots}", sel.slots.len())));
    }
    let mut sites = vec![None; n_slots];
    for (s, binding) in sel.slots.iter().enumerate() {
        let Some(binding) = binding else { continue };
        let own = |tape: &mut Tape<'p>, ad: &'p LoraAdapter| {
            if trainable.adapters {
                (tape.param(&ad.a, ParamRef::AdapterA(s).id(n_base)), tape.param(&ad.b, ParamRef::AdapterB(s).id(n_base)))
            } else {
                (tape.constant(&ad.a), tape.constant(&ad.b))
            }
        };
        sites[s] = Some(match *binding {
            SiteBinding::Lora(ad) => {
                let (a, b) = own(tape, ad);
                SiteVars::Lora { a, b, scaling: ad.scaling }
            }
            SiteBinding::Mixture { new, donor, gate } => {
                let (na, nb) = own(tape, new);
                let (da, db) = (tape.constant(&donor.a), tape.constant(&donor.b));
                let logits = if trainable.gates {
                    tape.param(&gate.logits, ParamRef::Gate(s).id(n_base))
                } else {
                    tape.constant(&gate.logits)
                };
                let w = tape.softmax_rows(logits, false)?;
                let w_new = tape.slice_cols(w, 0, 1)?;
                let w_donor = tape.slice_cols(w, 1, 1)?;
                SiteVars::Mixture { new: (na, nb, new.scaling), donor: (da, db, donor.scaling), w_new, w_donor }
            }
        });
    }
    Ok(Bound { base: base_vars, sites })
}

pub(crate) struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a BaseLayout,
    pub bound: &'a Bound,
}

impl Net<'_> {
    fn slot(&self, layer: usize, c: Component, m: Matrix) -> Option<&SiteVars> {
        let s = self.cfg.dims().slot(layer, c, m)?;
        self.bound.sites[s].as_ref()
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, idx: LinearIdx, site: Option<&SiteVars>) -> Result<Var> {
        linear_on_tape(tape, x, self.bound.base[idx.w], self.bound.base[idx.b], site)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, idx: NormIdx) -> Result<Var> {
        tape.layer_norm(x, self.bound.base[idx.gamma], self.bound.base[idx.beta])
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        q_in: Var,
        kv_in: Var,
        idx: &AttnIdx,
        layer: usize,
        comp: Component,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(tape, q_in, idx.q, self.slot(layer, comp, Matrix::Q))?;
        let k = self.linear(tape, kv_in, idx.k, self.slot(layer, comp, Matrix::K))?;
        let v = self.linear(tape, kv_in, idx.v, self.slot(layer, comp, Matrix::V))?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.softmax_rows(scores, causal)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.linear(tape, cat, idx.o, self.slot(layer, comp, Matrix::O))
    }

    fn mlp(&self, tape: &mut Tape<'_>, x: Var, fc1: LinearIdx, fc2: LinearIdx, layer: usize, comp: Component) -> Result<Var> {
        let h = self.linear(tape, x, fc1, self.slot(layer, comp, Matrix::Fc1))?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, fc2, self.slot(layer, comp, Matrix::Fc2))
    }

    fn positions(&self, tape: &mut Tape<'_>, table: usize, n: usize) -> Result<Var> {
        let ids: Vec<usize> = (0..n).collect();
        tape.gather_rows(self.bound.base[table], &ids)
    }

    pub fn encode(&self, tape: &mut Tape<'_>, frames: Var) -> Result<Var> {
        let [f, d_in] = tape.shape(frames);
        if d_in != self.cfg.d_in {
            return dim_err(format!("frame dim {d_in}, model expects {}", self.cfg.d_in));
        }
        if f == 0 || f > self.cfg.max_frames {
            return Err(Error::Contract(format!("{f} frames, model accepts 1..={}", self.cfg.max_frames)));
        }
        let x = self.linear(tape, frames, self.layout.input_proj, None)?;
        let pos = self.positions(tape, self.layout.enc_pos, f)?;
        let mut x = tape.add(x, pos)?;
        for (l, idx) in self.layout.enc.iter().enumerate() {
            let h = self.norm(tape, x, idx.ln_attn)?;
            let a = self.attention(tape, h, h, &idx.attn, l, Component::EncSelf, false)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, idx.ln_mlp)?;
            let m = self.mlp(tape, h, idx.fc1, idx.fc2, l, Component::EncMlp)?;
            x = tape.add(x, m)?;
        }
        self.norm(tape, x, self.layout.enc_ln)
    }

    /// Logits for every position of `tokens`, shape `len x vocab`.
    pub fn decode(&self, tape: &mut Tape<'_>, tokens: &[Token], h: Var) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        if tokens.len() > self.cfg.max_positions() {
            return Err(Error::Contract(format!(
                "decoder input of {} tokens exceeds {} positions",
                tokens.len(),
                self.cfg.max_positions()
            )));
        }
        if tape.shape(h)[1] != self.cfg.d_model {
            return dim_err(format!("encoder output width {}, expected {}", tape.shape(h)[1], self.cfg.d_model));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(self.bound.base[self.layout.tok_emb], &ids)?;
        let pos = self.positions(tape, self.layout.dec_pos, ids.len())?;
        let mut x = tape.add(emb, pos)?;
        for (l, idx) in self.layout.dec.iter().enumerate() {
            let y = self.norm(tape, x, idx.ln_self)?;
            let a = self.attention(tape, y, y, &idx.self_attn, l, Component::DecSelf, true)?;
            x = tape.add(x, a)?;
            let y = self.norm(tape, x, idx.ln_cross)?;
            let c = self.attention(tape, y, h, &idx.cross_attn, l, Component::DecCross, false)?;
            x = tape.add(x, c)?;
            let y = self.norm(tape, x, idx.ln_mlp)?;
            let m = self.mlp(tape, y, idx.fc1, idx.fc2, l, Component::DecMlp)?;
            x = tape.add(x, m)?;
        }
        let x = self.norm(tape, x, self.layout.dec_ln)?;
        tape.matmul_t(x, self.bound.base[self.layout.tok_emb])
    }
}

impl BaseWeights {
    pub(crate) fn net<'a>(&'a self, bound: &'a Bound) -> Net<'a> {
        Net { cfg: &self.config, layout: &self.layout, bound }
    }

    /// Hidden representations `H` of `frames` (`F x d_in`), shape `F x d_model`.
    pub fn encode(&self, frames: &Tensor, sel: &Selection<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self, sel, Trainable::default())?;
        let x = tape.constant(frames);
        let h = self.net(&bound).encode(&mut tape, x)?;
        Ok(tape.to_tensor(h))
    }

    /// Logits at every position of `prompt ++ prefix`, shape `len x vocab`.
    pub fn decode_logits(&self, prompt: &[Token], prefix: &[Token], h: &Tensor, sel: &Selection<'_>) -> Result<Tensor> {
        if prompt.first() != Some(&self.config.special().sot) {
            return Err(Error::Contract("prompt must begin with SOT".into()));
        }
        let vocab = self.config.vocab_size as Token;
        if let Some(bad) = prompt.iter().chain(prefix).find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let tokens: Vec<Token> = prompt.iter().chain(prefix).copied().collect();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self, sel, Trainable::default())?;
        let hv = tape.constant(h);
        let logits = self.net(&bound).decode(&mut tape, &tokens, hv)?;
        Ok(tape.to_tensor(logits))
    }

    /// Next-token logits after `prompt ++ prefix`.
    pub fn decode_step(&self, prompt: &[Token], prefix: &[Token], h: &Tensor, sel: &Selection<'_>) -> Result<Vec<f64>> {
        let logits = self.decode_logits(prompt, prefix, h, sel)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}
