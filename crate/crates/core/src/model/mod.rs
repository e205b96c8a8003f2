//! Sequence model: layout of supervision sequences, the block-causal mask,
//! and a small transformer with a unified head over text, control and
//! visual tokens.

mod config;
mod layers;
mod sequence;
mod transformer;

pub use config::ModelConfig;
pub use sequence::{attention_mask, SequenceSample, Slot};
pub use transformer::{cross_entropy, decays, Embedded, Logits, Transformer};
