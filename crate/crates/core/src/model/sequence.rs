//! Sequence layout shared by training and inference.
//!
//! A sequence is `[image patches][instruction words] <gen_start> [queries for
//! scale 2] … [queries for scale K] <gen_end>`. The `<gen_start>` slot is the
//! single query of scale 1; queries of scale `k > 1` are built from the token
//! map of scale `k − 1`. The trailing `<gen_end>` slot reads the finished
//! final-scale map and is supervised to emit `<gen_end>`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tokenizer::{Schedule, TokenMap};
use crate::vocab::UnifiedVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Row `i` of the sample's patch features.
    Patch(usize),
    Text(u32),
    GenStart,
    /// Query for position `position` (row-major) of 1-based scale `scale ≥ 2`.
    Query { scale: usize, position: usize },
    GenEnd,
    /// A previously emitted visual token fed back as input. Only used by the
    /// token-by-token reference decoder, which has no scale blocks.
    Emitted(u32),
}

impl Slot {
    pub fn is_prefix(&self) -> bool {
        matches!(self, Slot::Patch(_) | Slot::Text(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub slots: Vec<Slot>,
    /// Patch features, `n_patches × patch_dim`, channels last.
    pub patches: Vec<f32>,
    pub patch_dim: usize,
    /// Token maps feeding the queries: entry `k − 1` holds `r_k`.
    pub visual_inputs: Vec<TokenMap>,
    /// `None` is the no-loss marker.
    pub targets: Vec<Option<u32>>,
    pub loss_mask: Vec<bool>,
    /// Slot range of each scale block, in scale order.
    pub scale_blocks: Vec<Range<usize>>,
    /// Set when `visual_inputs` are ground-truth maps rather than predictions.
    pub teacher_forced: bool,
}

impl SequenceSample {
    /// A prompt with no visual blocks: patch slots followed by text slots.
    pub fn prompt(patches: Vec<f32>, patch_dim: usize, text: &[u32]) -> Self {
        let n = if patch_dim == 0 { 0 } else { patches.len() / patch_dim };
        let mut slots: Vec<Slot> = (0..n).map(Slot::Patch).collect();
        slots.extend(text.iter().map(|&t| Slot::Text(t)));
        let len = slots.len();
        Self {
            slots,
            patches,
            patch_dim,
            visual_inputs: Vec::new(),
            targets: vec![None; len],
            loss_mask: vec![false; len],
            scale_blocks: Vec::new(),
            teacher_forced: false,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.slots.iter().take_while(|s| s.is_prefix()).count()
    }

    /// Appends `<gen_start>` plus the query blocks of scales `2..=upto`,
    /// using `visual_inputs` (which must hold at least `upto − 1` maps).
    /// Targets for the new slots are left unset.
    pub fn open_blocks(&mut self, schedule: &Schedule, upto: usize) -> Result<()> {
        if !self.scale_blocks.is_empty() {
            return Err(Error::Config("sequence already has visual blocks".into()));
        }
        if upto == 0 || upto > schedule.len() {
            return Err(Error::Schedule(format!("cannot open {upto} blocks of a {}-scale schedule", schedule.len())));
        }
        if self.visual_inputs.len() + 1 < upto {
            return Err(Error::Schedule(format!("scale {upto} needs map r_{}", upto - 1)));
        }
        let start = self.slots.len();
        self.push_slot(Slot::GenStart);
        self.scale_blocks.push(start..start + 1);
        for k in 2..=upto {
            let start = self.slots.len();
            for p in 0..schedule.tokens_at(k - 1) {
                self.push_slot(Slot::Query { scale: k, position: p });
            }
            self.scale_blocks.push(start..self.slots.len());
        }
        Ok(())
    }

    /// Appends the closing `<gen_end>` slot (needs the final map in `visual_inputs`).
    pub fn close(&mut self, schedule: &Schedule) -> Result<usize> {
        if self.scale_blocks.len() != schedule.len() || self.visual_inputs.len() < schedule.len() {
            return Err(Error::Schedule("cannot close an incomplete generation".into()));
        }
        self.push_slot(Slot::GenEnd);
        Ok(self.slots.len() - 1)
    }

    fn push_slot(&mut self, slot: Slot) {
        self.slots.push(slot);
        self.targets.push(None);
        self.loss_mask.push(false);
    }

    pub fn set_target(&mut self, pos: usize, id: u32) {
        self.targets[pos] = Some(id);
        self.loss_mask[pos] = true;
    }

    pub fn supervised_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Last slot each position may attend to. Prefix and trailing slots are
    /// strictly causal; a scale block sees everything up to its own end.
    pub fn horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = (0..self.slots.len()).collect();
        for b in &self.scale_blocks {
            for v in &mut h[b.clone()] {
                *v = b.end - 1;
            }
        }
        h
    }

    /// Structural checks against a schedule and vocabulary.
    pub fn validate(&self, schedule: &Schedule, vocab: &UnifiedVocab) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("malformed sequence: {m}")));
        let n = self.slots.len();
        if self.targets.len() != n || self.loss_mask.len() != n {
            return bad("slots, targets and loss mask differ in length".into());
        }
        if self.targets.iter().zip(&self.loss_mask).any(|(t, &m)| t.is_some() != m) {
            return bad("loss mask disagrees with targets".into());
        }
        if self.patch_dim > 0 && !self.patches.len().is_multiple_of(self.patch_dim) {
            return bad("patch buffer is not a multiple of patch_dim".into());
        }
        let n_patches = if self.patch_dim == 0 { 0 } else { self.patches.len() / self.patch_dim };
        let prefix = self.prefix_len();
        for (i, s) in self.slots.iter().enumerate() {
            match *s {
                Slot::Patch(p) if p >= n_patches => return bad(format!("patch {p} out of range")),
                Slot::Text(t) if !vocab.is_text(t) => return bad(format!("slot {i} holds non-text id {t}")),
                _ if s.is_prefix() && i >= prefix => return bad(format!("prefix slot {i} after generation started")),
                _ => {}
            }
        }
        if self.scale_blocks.len() > schedule.len() {
            return bad("more blocks than scales".into());
        }
        let mut expected_start = prefix;
        for (k, b) in self.scale_blocks.iter().enumerate() {
            if b.start != expected_start || b.len() != schedule.tokens_at(k) {
                return bad(format!("block {} has range {b:?}", k + 1));
            }
            for (p, i) in b.clone().enumerate() {
                let want = if k == 0 { Slot::GenStart } else { Slot::Query { scale: k + 1, position: p } };
                if self.slots[i] != want {
                    return bad(format!("slot {i} should be {want:?}"));
                }
                if let Some(t) = self.targets[i] {
                    if !vocab.is_visual(t) {
                        return bad(format!("block target {t} at slot {i} is not visual"));
                    }
                }
            }
            if k >= 1 && self.visual_inputs.len() < k {
                return bad(format!("missing input map r_{k}"));
            }
            expected_start = b.end;
        }
        let tail = &self.slots[expected_start..];
        match tail {
            [] => {}
            [Slot::GenEnd] if self.scale_blocks.len() == schedule.len() => {}
            [Slot::GenStart, rest @ ..]
                if self.scale_blocks.is_empty()
                    && rest.len() < schedule.tokens_at(schedule.len() - 1)
                    && rest.iter().all(|x| matches!(x, Slot::Emitted(t) if vocab.is_visual(*t))) => {}
            _ => return bad("unexpected slots after the last block".into()),
        }
        for (k, m) in self.visual_inputs.iter().enumerate() {
            let (h, w) = schedule.scales().get(k).copied().unwrap_or((0, 0));
            if m.height != h || m.width != w || m.indices.len() != h * w {
                return bad(format!("input map {} has the wrong shape", k + 1));
            }
            if m.indices.iter().any(|&v| v as usize >= vocab.visual_count()) {
                return bad(format!("input map {} holds an out-of-range index", k + 1));
            }
        }
        Ok(())
    }
}

/// Dense boolean allow-matrix (`allow[i][j]`: position `i` may attend to `j`).
pub fn attention_mask(sample: &SequenceSample) -> Vec<Vec<bool>> {
    let h = sample.horizons();
    (0..sample.len()).map(|i| (0..sample.len()).map(|j| j <= h[i]).collect()).collect()
}
