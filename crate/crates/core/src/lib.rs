//! Auxiliary tuning of frozen autoregressive language models.
//!
//! A frozen pre-trained [`transformer::CausalLM`] is paired with a trainable
//! auxiliary pathway whose next-token logits are added to the base logits;
//! the softmax of the sum is the attribute-conditioned distribution. The
//! crate carries everything needed to reproduce keyword-conditioned
//! generation at desk scale: a small reverse-mode autodiff engine, the
//! transformer, training loops, synthetic corpora with an exact oracle, and
//! the fluency / keyword-accuracy metrics.

pub mod autodiff;
pub mod auxtune;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub(crate) mod params;
pub mod plot;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
