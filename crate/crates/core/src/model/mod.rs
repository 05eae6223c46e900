//! Toy Whisper-style encoder-decoder.
//!
//! Pre-norm transformer blocks with learned absolute positions. The encoder
//! maps `F x d_in` frames to `H`; the decoder reads `[SOT, LANG(k), TASK]`
//! followed by text tokens and attends to `H`. Output logits reuse the token
//! embedding. Every linear map can carry a low-rank delta chosen by a
//! [`Selection`].

mod config;
mod decode;
mod forward;
mod weights;

pub use config::{ModelConfig, SpecialTokens, Token, PROMPT_LEN};
pub use decode::{DecodeConfig, Hypothesis};
pub use forward::{ParamRef, Selection, SiteBinding, Trainable};
pub use weights::BaseWeights;

pub(crate) use forward::bind;
