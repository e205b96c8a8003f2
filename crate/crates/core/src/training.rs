//! Supervision sequences and the single-stage fine-tuning loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskImage;
use crate::model::{decays, SequenceSample, Transformer};
use crate::params::{cosine_lr, AdamW, AdamWConfig};
use crate::tokenizer::{Codebook, Tokenizer};
use crate::vocab::UnifiedVocab;

/// Side of the square pixel patches fed to the vision projector.
pub const PATCH: usize = 4;

/// Frozen patchifier: splits an `H × W × 3` raster into `PATCH × PATCH`
/// patches, each flattened row-major with channels last.
pub fn patchify(planes: &[f32], height: usize, width: usize) -> Result<Vec<f32>> {
    if planes.len() != height * width * 3 {
        return Err(Error::Image(format!("{} values for a {height}x{width}x3 raster", planes.len())));
    }
    if !height.is_multiple_of(PATCH) || !width.is_multiple_of(PATCH) {
        return Err(Error::Image(format!("{height}x{width} raster is not divisible into {PATCH}-pixel patches")));
    }
    let mut out = Vec::with_capacity(planes.len());
    for py in 0..height / PATCH {
        for px in 0..width / PATCH {
            for y in py * PATCH..(py + 1) * PATCH {
                let row = (y * width + px * PATCH) * 3;
                out.extend_from_slice(&planes[row..row + PATCH * 3]);
            }
        }
    }
    Ok(out)
}

pub fn patch_dim() -> usize {
    PATCH * PATCH * 3
}

/// Prompt-only sequence: image patches followed by the instruction words.
pub fn build_prompt(planes: &[f32], height: usize, width: usize, instruction: &str, vocab: &UnifiedVocab) -> Result<SequenceSample> {
    let patches = patchify(planes, height, width)?;
    Ok(SequenceSample::prompt(patches, patch_dim(), &vocab.encode_text(instruction)))
}

/// Teacher-forced training sequence for one (image, instruction, mask) triple.
pub fn build_supervision(
    planes: &[f32],
    instruction: &str,
    mask: &MaskImage,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
) -> Result<SequenceSample> {
    let (h, w) = (mask.height(), mask.width());
    if tokenizer.config().image_dims() != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {h}x{w} does not match tokenizer input {:?}",
            tokenizer.config().image_dims()
        )));
    }
    let maps = tokenizer.tokenize(mask)?;
    maps.check_indices(vocab.visual_count())?;
    let schedule = tokenizer.schedule();
    let mut s = build_prompt(planes, h, w, instruction, vocab)?;
    if s.is_empty() {
        return Err(Error::Config("prompt has neither image nor instruction".into()));
    }
    let last_prompt = s.len() - 1;
    s.visual_inputs = maps.maps.clone();
    s.teacher_forced = true;
    s.open_blocks(schedule, schedule.len())?;
    let end = s.close(schedule)?;
    s.set_target(last_prompt, vocab.gen_start_id());
    let ids = vocab.maps_to_ids(&maps)?;
    let first = s.scale_blocks[0].start;
    for (i, id) in ids.into_iter().enumerate() {
        s.set_target(first + i, id);
    }
    s.set_target(end, vocab.gen_end_id());
    s.validate(schedule, vocab)?;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor of the cosine decay, as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub schedule: LrSchedule,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Steps between checks that the codebook is unchanged.
    pub frozen_check_every: usize,
    pub toy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 3e-4,
            min_lr_frac: 0.1,
            schedule: LrSchedule::Cosine,
            warmup_frac: 0.05,
            batch_size: 32,
            steps: 10_000,
            seed: 0,
            optimizer: AdamWConfig::default(),
            frozen_check_every: 500,
            toy: true,
        }
    }

    /// Full-size setting: lr 4e-5, batch 128, cosine decay.
    pub fn full() -> Self {
        Self { lr: 4e-5, batch_size: 128, toy: false, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1) and min_lr_frac in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.steps as f64 * self.warmup_frac).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine_lr(step, self.steps, self.warmup_steps(), self.lr, self.lr * self.min_lr_frac),
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Bitwise fingerprint of a codebook (FNV-1a over the f32 bit patterns).
pub fn codebook_fingerprint(codebook: &Codebook) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in codebook.vectors() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Model, optimizer and step counter for a run.
pub struct Trainer<'a> {
    pub model: Transformer<f32>,
    pub config: TrainConfig,
    optimizer: AdamW<f32>,
    vocab: &'a UnifiedVocab,
    codebook: &'a Codebook,
    fingerprint: u64,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Transformer<f32>, config: TrainConfig, vocab: &'a UnifiedVocab, codebook: &'a Codebook) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(model.params(), config.optimizer, decays);
        Ok(Self { model, config, optimizer, vocab, codebook, fingerprint: codebook_fingerprint(codebook), step: 0 })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One optimizer update over `batch` at learning rate `lr`; returns the
    /// mean loss of the batch before the update.
    pub fn train_step(&mut self, batch: &[&SequenceSample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(s) = batch.iter().find(|s| !s.scale_blocks.is_empty() && !s.teacher_forced) {
            return Err(Error::Config(format!(
                "training sequence of length {} is not teacher-forced",
                s.len()
            )));
        }
        let mut grads = self.model.params().zeros_like();
        let weight = 1.0 / batch.len() as f32;
        let mut total = 0.0f64;
        for s in batch {
            let l = self.model.accumulate_gradients(s, self.vocab, self.codebook, weight, &mut grads)?;
            total += l as f64;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step, reason: format!("loss {loss}") });
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Diverged { step: self.step, reason: format!("non-finite gradient in {name}") });
        }
        self.optimizer.update(self.model.params_mut(), &grads, lr, &[]);
        if let Some(name) = self.model.params().first_non_finite() {
            return Err(Error::Diverged { step: self.step, reason: format!("non-finite parameter {name}") });
        }
        self.step += 1;
        if self.config.frozen_check_every > 0 && self.step.is_multiple_of(self.config.frozen_check_every) {
            self.check_frozen()?;
        }
        Ok(loss)
    }

    pub fn check_frozen(&self) -> Result<()> {
        if codebook_fingerprint(self.codebook) != self.fingerprint {
            return Err(Error::Diverged { step: self.step, reason: "tokenizer codebook changed".into() });
        }
        Ok(())
    }

    /// Runs the configured number of steps over `data`, visiting it in a
    /// seeded shuffled order, epoch after epoch.
    pub fn run(&mut self, data: &[SequenceSample], mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut history = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let lr = self.config.lr_at(self.step);
            let step = self.step;
            let loss = self.train_step(&batch, lr)?;
            let entry = StepLog { step, lr, loss };
            log(&entry);
            history.push(entry);
        }
        self.check_frozen()?;
        Ok(history)
    }
}

/// Teacher-forced argmax accuracy per scale, restricted to visual IDs.
pub fn teacher_forced_accuracy(
    model: &Transformer<f32>,
    data: &[SequenceSample],
    vocab: &UnifiedVocab,
    codebook: &Codebook,
) -> Result<Vec<f64>> {
    let k = model.config().schedule.len();
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for s in data {
        let rows: Vec<usize> = s.scale_blocks.iter().flat_map(|b| b.clone()).collect();
        let logits = model.logits_at(s, vocab, codebook, &rows)?;
        let mut r = 0;
        for (scale, b) in s.scale_blocks.iter().enumerate() {
            for i in b.clone() {
                let pred = crate::inference::sample_argmax(&crate::inference::mask_visual_logits(logits.row(r), vocab));
                if Some(pred) == s.targets[i] {
                    hits[scale] += 1;
                }
                counts[scale] += 1;
                r += 1;
            }
        }
    }
    Ok(hits.iter().zip(&counts).map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 }).collect())
}
