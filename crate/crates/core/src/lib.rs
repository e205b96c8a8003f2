//! Generation-based segmentation at desk scale: a multi-scale residual VQ
//! tokenizer for masks and a small decoder-only transformer that emits those
//! tokens with next-scale prediction.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mask;
pub mod model;
pub mod params;
pub mod real;
pub mod resize;
pub mod tokenizer;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
