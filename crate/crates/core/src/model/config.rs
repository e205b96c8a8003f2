use crate::error::{Error, Result};
use crate::tokenizer::Schedule;

/// Decoder-only transformer hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Upper bound on prefix + all scale blocks + the closing slot.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub schedule: Schedule,
    /// Codebook vector width `D` (input of the generation projector).
    pub latent_dim: usize,
    /// Width of one image-patch feature (input of the vision projector).
    pub patch_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, latent_dim: usize, patch_dim: usize) -> Self {
        let schedule = Schedule::toy();
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 512,
            max_seq_len: 64 + 24 + schedule.total_tokens() + 1,
            vocab_size,
            schedule,
            latent_dim,
            patch_dim,
            seed: 0,
        }
    }

    /// Room left for image patches and instruction words.
    pub fn max_prefix_len(&self) -> usize {
        self.max_seq_len.saturating_sub(self.schedule.total_tokens() + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return err("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err("d_model must be divisible by n_heads");
        }
        if self.latent_dim == 0 {
            return err("latent_dim must be positive");
        }
        if self.vocab_size < 4 {
            return err("vocab_size too small");
        }
        if self.max_prefix_len() == 0 {
            return err("max_seq_len leaves no room for a prompt");
        }
        Ok(())
    }
}
