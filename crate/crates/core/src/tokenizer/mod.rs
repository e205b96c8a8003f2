//! Frozen visual tokenizer: encoder, multi-scale residual quantizer, decoder.

pub mod autoencoder;
pub mod conv;
pub mod quantize;

pub use autoencoder::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerStepLog, TokenizerTrainConfig};
pub use quantize::{
    lookup, multi_scale_quantize, multi_scale_reconstruct, quantize_residual, Codebook, LatentGrid,
    MultiScaleTokenMaps, ResidualQuantization, ScalePyramid, Schedule, TokenMap,
};
