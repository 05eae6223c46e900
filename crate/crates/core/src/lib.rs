//! Language-specific LoRA adapters on a frozen toy speech model.
//!
//! A small encoder-decoder is pretrained once and frozen. Every language gets
//! its own set of low-rank adapters, selected per utterance by language id.
//! New languages are added by a fresh adapter set, optionally warm-started
//! from the most similar existing language or mixed with it, without
//! touching any other language's parameters.

pub mod bank;
pub mod error;
pub mod evaluation;
pub mod expansion;
pub mod experiment;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod similarity;
pub mod synth;
pub mod training;

pub use bank::{AdapterBank, BankEntry, LanguageId};
pub use error::{Error, Result};
pub use model::{BaseWeights, DecodeConfig, ModelConfig, Selection};
pub use numerics::Tensor;
