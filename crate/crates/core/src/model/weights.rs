use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln_attn: NormIdx,
    pub attn: AttnIdx,
    pub ln_mlp: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln_self: NormIdx,
    pub self_attn: AttnIdx,
    pub ln_cross: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln_mlp: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

/// Names, shapes and positions of every base tensor, in canonical order.
#[derive(Clone, Debug)]
pub(crate) struct BaseLayout {
    pub specs: Vec<TensorSpec>,
    pub input_proj: LinearIdx,
    pub enc_pos: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: NormIdx,
    pub tok_emb: usize,
    pub dec_pos: usize,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: NormIdx,
}

const EMB_STD: f64 = 0.1;

impl BaseLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init| {
            specs.push(TensorSpec { name, rows, cols, init });
            specs.len() - 1
        };
        let d = cfg.d_model;
        let linear = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize, name: &str, d_out: usize, d_in: usize| {
            let bound = 1.0 / (d_in as f64).sqrt();
            LinearIdx {
                w: add(format!("{name}.weight"), d_out, d_in, Init::Uniform(bound)),
                b: add(format!("{name}.bias"), 1, d_out, Init::Zeros),
            }
        };
        let norm = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize, name: &str| NormIdx {
            gamma: add(format!("{name}.gamma"), 1, d, Init::Ones),
            beta: add(format!("{name}.beta"), 1, d, Init::Zeros),
        };

        let input_proj = linear(&mut add, "encoder.input_proj", d, cfg.d_in);
        let enc_pos = add("encoder.pos".into(), cfg.max_frames, d, Init::Normal(EMB_STD));
        let mut enc = Vec::new();
        for l in 0..cfg.n_enc_layers {
            let p = format!("encoder.layers.{l}");
            let ln_attn = norm(&mut add, &format!("{p}.ln_attn"));
            let attn = AttnIdx {
                q: linear(&mut add, &format!("{p}.attn.q"), d, d),
                k: linear(&mut add, &format!("{p}.attn.k"), d, d),
                v: linear(&mut add, &format!("{p}.attn.v"), d, d),
                o: linear(&mut add, &format!("{p}.attn.o"), d, d),
            };
            let ln_mlp = norm(&mut add, &format!("{p}.ln_mlp"));
            let fc1 = linear(&mut add, &format!("{p}.fc1"), cfg.ffn_dim, d);
            let fc2 = linear(&mut add, &format!("{p}.fc2"), d, cfg.ffn_dim);
            enc.push(EncLayerIdx { ln_attn, attn, ln_mlp, fc1, fc2 });
        }
        let enc_ln = norm(&mut add, "encoder.ln_post");

        let tok_emb = add("decoder.tok_emb".into(), cfg.vocab_size, d, Init::Normal(EMB_STD));
        let dec_pos = add("decoder.pos".into(), cfg.max_positions(), d, Init::Normal(EMB_STD));
        let mut dec = Vec::new();
        for l in 0..cfg.n_dec_layers {
            let p = format!("decoder.layers.{l}");
            let ln_self = norm(&mut add, &format!("{p}.ln_self"));
            let self_attn = AttnIdx {
                q: linear(&mut add, &format!("{p}.self.q"), d, d),
                k: linear(&mut add, &format!("{p}.self.k"), d, d),
                v: linear(&mut add, &format!("{p}.self.v"), d, d),
                o: linear(&mut add, &format!("{p}.self.o"), d, d),
            };
            let ln_cross = norm(&mut add, &format!("{p}.ln_cross"));
            let cross_attn = AttnIdx {
                q: linear(&mut add, &format!("{p}.cross.q"), d, d),
                k: linear(&mut add, &format!("{p}.cross.k"), d, d),
                v: linear(&mut add, &format!("{p}.cross.v"), d, d),
                o: linear(&mut add, &format!("{p}.cross.o"), d, d),
            };
            let ln_mlp = norm(&mut add, &format!("{p}.ln_mlp"));
            let fc1 = linear(&mut add, &format!("{p}.fc1"), cfg.ffn_dim, d);
            let fc2 = linear(&mut add, &format!("{p}.fc2"), d, cfg.ffn_dim);
            dec.push(DecLayerIdx { ln_self, self_attn, ln_cross, cross_attn, ln_mlp, fc1, fc2 });
        }
        let dec_ln = norm(&mut add, "decoder.ln_post");

        Self { specs, input_proj, enc_pos, enc, enc_ln, tok_emb, dec_pos, dec, dec_ln }
    }
}

/// The frozen foundation: configuration plus every base tensor.
#[derive(Clone, Debug)]
pub struct BaseWeights {
    pub(crate) config: ModelConfig,
    pub(crate) layout: BaseLayout,
    pub(crate) tensors: Vec<Tensor>,
}

impl PartialEq for BaseWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl BaseWeights {
    /// Seeded random initialization, rounded to `f32`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = BaseLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n = s.rows * s.cols;
                let data: Vec<f64> = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b) as f32 as f64).collect(),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng) as f32 as f64).collect()
                    }
                };
                Tensor::from_vec(s.rows, s.cols, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layout, tensors })
    }

    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = BaseLayout::new(&config);
        if named.len() != layout.specs.len() {
            return Err(Error::Format(format!("expected {} base tensors, found {}", layout.specs.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || t.shape() != [spec.rows, spec.cols] {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match expected {} {}x{}",
                    t.shape(),
                    spec.name,
                    spec.rows,
                    spec.cols
                )));
            }
            tensors.push(t);
        }
        Ok(Self { config, layout, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensor_names().zip(&self.tensors)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.layout.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layout.specs.iter().position(|s| s.name == name).map(move |i| &mut self.tensors[i])
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn snap_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.snap_to_f32();
        }
    }

    /// Canonical little-endian `f32` payload: config JSON, then every tensor's
    /// name, shape and values.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.config).expect("config serializes");
        for (name, t) in self.named_tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of [`BaseWeights::payload_bytes`].
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.payload_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, ffn_dim: 16, vocab_size: 24, ..Default::default() };
        let a = BaseWeights::init(cfg.clone(), 3).unwrap();
        let b = BaseWeights::init(cfg.clone(), 3).unwrap();
        let c = BaseWeights::init(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert!(a.tensors.iter().all(Tensor::is_f32_exact));
    }

    #[test]
    fn names_are_unique() {
        let layout = BaseLayout::new(&ModelConfig::default());
        let mut names: Vec<_> = layout.specs.iter().map(|s| s.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(n, names.len());
    }
}
