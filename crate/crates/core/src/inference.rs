//! Generation: text decoding up to `<gen_start>`, then one forward pass per
//! scale, then detokenization to a mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskImage};
use crate::model::{SequenceSample, Slot, Transformer};
use crate::real::Real;
use crate::tokenizer::{MultiScaleTokenMaps, TokenMap, Tokenizer};
use crate::training::build_prompt;
use crate::vocab::UnifiedVocab;

/// Predictions with fewer positive pixels than this fraction count as empty.
pub const EMPTY_FRACTION: f64 = 0.001;

/// Non-visual IDs become `-inf`.
pub fn mask_visual_logits<T: Real>(row: &[T], vocab: &UnifiedVocab) -> Vec<T> {
    row.iter()
        .enumerate()
        .map(|(i, &v)| if vocab.is_visual(i as u32) { v } else { T::neg_infinity() })
        .collect()
}

/// Index of the largest value; ties and NaNs resolve to the lowest index.
pub fn sample_argmax<T: Real>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best as u32
}

/// `uncond + w·(cond − uncond)`, written as `cond + (w − 1)·(cond − uncond)`
/// so that `w = 1` returns the conditional logits exactly. Entries that are
/// `-inf` in either input stay `-inf`.
pub fn guided_logits(cond: &[f32], uncond: &[f32], w: f32) -> Vec<f32> {
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| {
            if c == f32::NEG_INFINITY || u == f32::NEG_INFINITY {
                return f32::NEG_INFINITY;
            }
            let shift = (w - 1.0) * (c - u);
            if shift == 0.0 {
                c
            } else {
                c + shift
            }
        })
        .collect()
}

/// The `k` largest finite entries (lowest index first among ties) with their
/// renormalized softmax probabilities.
pub fn top_k_distribution(logits: &[f32], k: usize) -> Result<Vec<(u32, f64)>> {
    let finite = logits.iter().filter(|v| v.is_finite()).count();
    if k == 0 || k > finite {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {finite}, got {k}")));
    }
    let mut idx: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let max = logits[idx[0]] as f64;
    let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] as f64 - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(idx.into_iter().zip(weights).map(|(i, w)| (i as u32, w / z)).collect())
}

/// Classifier-free guidance followed by top-k sampling.
pub fn sample_cfg_topk<R: Rng>(cond: &[f32], uncond: &[f32], w: f32, k: usize, rng: &mut R) -> Result<u32> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Config(format!("guidance scale must be finite and >= 0, got {w}")));
    }
    if cond.len() != uncond.len() {
        return Err(Error::Dimension("conditional and unconditional logits differ in length".into()));
    }
    let dist = top_k_distribution(&guided_logits(cond, uncond, w), k)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(dist.last().expect("k >= 1").0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Argmax,
    /// The unconditional branch runs with an empty prompt.
    CfgTopK { guidance: f32, top_k: usize, seed: u64 },
}

impl Sampling {
    pub fn validate(&self, vocab: &UnifiedVocab) -> Result<()> {
        if let Sampling::CfgTopK { guidance, top_k, .. } = *self {
            if !(guidance >= 0.0 && guidance.is_finite()) {
                return Err(Error::Config("guidance scale must be finite and >= 0".into()));
            }
            if top_k == 0 || top_k > vocab.visual_count() {
                return Err(Error::Config(format!("top_k must lie in 1..={}", vocab.visual_count())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Text IDs decoded before `<gen_start>` (usually none).
    pub text_ids: Vec<u32>,
    /// Every ID emitted after the prompt, including both control tokens.
    pub emitted: Vec<u32>,
    pub maps: Option<MultiScaleTokenMaps>,
    /// Decoded soft mask, all zeros when nothing was generated.
    pub mask: MaskImage,
    /// Binarized mask after the empty-prediction rule.
    pub binary: BinaryMask,
    /// Sequential model steps spent on visual tokens.
    pub visual_passes: usize,
    /// Model evaluations in total (text steps plus both CFG branches).
    pub model_evaluations: usize,
}

impl Generation {
    pub fn generated(&self) -> bool {
        self.maps.is_some()
    }
}

/// True when a binarized prediction has under 0.1% positive pixels.
pub fn is_empty_prediction(mask: &BinaryMask) -> bool {
    (mask.count() as f64) < EMPTY_FRACTION * mask.bits.len() as f64
}

/// Binarizes and applies the empty-prediction rule.
pub fn finalize_mask(mask: &MaskImage) -> BinaryMask {
    let b = mask.binarize();
    if is_empty_prediction(&b) {
        BinaryMask::empty(b.height, b.width)
    } else {
        b
    }
}

/// Detokenizes only the first `j` scales.
pub fn decode_prefix_scales(maps: &MultiScaleTokenMaps, j: usize, tokenizer: &Tokenizer) -> Result<MaskImage> {
    if j == 0 || j > maps.maps.len() {
        return Err(Error::Schedule(format!("prefix length {j} outside 1..={}", maps.maps.len())));
    }
    tokenizer.detokenize(&maps.truncated(j))
}

/// Sequence with scale blocks `1..=k` built on `maps` (the first `k − 1`).
pub fn with_blocks(prompt: &SequenceSample, maps: &[TokenMap], k: usize, tokenizer: &Tokenizer) -> Result<SequenceSample> {
    let mut s = prompt.clone();
    s.visual_inputs = maps.to_vec();
    s.open_blocks(tokenizer.schedule(), k)?;
    Ok(s)
}

pub fn generate(
    model: &Transformer<f32>,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
    planes: &[f32],
    instruction: &str,
    sampling: Sampling,
) -> Result<Generation> {
    sampling.validate(vocab)?;
    let schedule = tokenizer.schedule();
    if model.config().schedule != *schedule {
        return Err(Error::Schedule("model and tokenizer schedules differ".into()));
    }
    let (h, w) = tokenizer.config().image_dims();
    let codebook = tokenizer.codebook();
    let mut prompt = build_prompt(planes, h, w, instruction, vocab)?;
    let mut evaluations = 0;
    let mut text_ids = Vec::new();
    let mut emitted = Vec::new();
    let nothing = |text_ids, emitted, evaluations| Generation {
        text_ids,
        emitted,
        maps: None,
        mask: MaskImage::zeros(h, w),
        binary: BinaryMask::empty(h, w),
        visual_passes: 0,
        model_evaluations: evaluations,
    };

    // text phase: greedy over the full vocabulary until <gen_start>
    loop {
        if prompt.is_empty() {
            break;
        }
        let last = prompt.len() - 1;
        let logits = model.logits_at(&prompt, vocab, codebook, &[last])?;
        evaluations += 1;
        let id = sample_argmax(logits.row(0));
        emitted.push(id);
        if id == vocab.gen_start_id() {
            break;
        }
        if !vocab.is_text(id) || prompt.prefix_len() >= model.config().max_prefix_len() {
            return Ok(nothing(text_ids, emitted, evaluations));
        }
        text_ids.push(id);
        prompt.slots.push(Slot::Text(id));
        prompt.targets.push(None);
        prompt.loss_mask.push(false);
    }
    if emitted.last() != Some(&vocab.gen_start_id()) {
        emitted.push(vocab.gen_start_id());
    }

    let empty_prompt = SequenceSample::prompt(Vec::new(), prompt.patch_dim, &[]);
    let mut rng = match sampling {
        Sampling::CfgTopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Argmax => None,
    };
    let mut maps: Vec<TokenMap> = Vec::with_capacity(schedule.len());
    let mut passes = 0;
    for k in 1..=schedule.len() {
        let s = with_blocks(&prompt, &maps, k, tokenizer)?;
        let rows: Vec<usize> = s.scale_blocks[k - 1].clone().collect();
        let cond = model.logits_at(&s, vocab, codebook, &rows)?;
        passes += 1;
        evaluations += 1;
        let uncond = match sampling {
            Sampling::CfgTopK { .. } => {
                let u = with_blocks(&empty_prompt, &maps, k, tokenizer)?;
                let urows: Vec<usize> = u.scale_blocks[k - 1].clone().collect();
                evaluations += 1;
                Some(model.logits_at(&u, vocab, codebook, &urows)?)
            }
            Sampling::Argmax => None,
        };
        let mut indices = Vec::with_capacity(rows.len());
        for r in 0..rows.len() {
            let c = mask_visual_logits(cond.row(r), vocab);
            let id = match (sampling, &uncond, rng.as_mut()) {
                (Sampling::CfgTopK { guidance, top_k, .. }, Some(u), Some(rng)) => {
                    let u = mask_visual_logits(u.row(r), vocab);
                    sample_cfg_topk(&c, &u, guidance, top_k, rng)?
                }
                _ => sample_argmax(&c),
            };
            debug_assert!(vocab.is_visual(id));
            emitted.push(id);
            indices.push(vocab.visual_index(id)?);
        }
        let (mh, mw) = schedule.scales()[k - 1];
        maps.push(TokenMap { scale_index: k, height: mh, width: mw, indices });
    }
    emitted.push(vocab.gen_end_id());

    let maps = MultiScaleTokenMaps::new(schedule.clone(), maps)?;
    let mask = tokenizer.detokenize(&maps)?;
    let binary = finalize_mask(&mask);
    Ok(Generation {
        text_ids,
        emitted,
        maps: Some(maps),
        mask,
        binary,
        visual_passes: passes,
        model_evaluations: evaluations,
    })
}

/// Reference decoder: emits the final-scale map one token per forward pass
/// with a strictly causal mask, feeding each token back as input. Returns
/// the final-scale indices and the number of passes.
pub fn generate_next_token_baseline(
    model: &Transformer<f32>,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
    planes: &[f32],
    instruction: &str,
) -> Result<(Vec<u32>, usize)> {
    let (h, w) = tokenizer.config().image_dims();
    let codebook = tokenizer.codebook();
    let mut s = build_prompt(planes, h, w, instruction, vocab)?;
    s.slots.push(Slot::GenStart);
    s.targets.push(None);
    s.loss_mask.push(false);
    let n = tokenizer.schedule().tokens_at(tokenizer.schedule().len() - 1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let last = s.len() - 1;
        let logits = model.logits_at(&s, vocab, codebook, &[last])?;
        let id = sample_argmax(&mask_visual_logits(logits.row(0), vocab));
        out.push(vocab.visual_index(id)?);
        if out.len() < n {
            s.slots.push(Slot::Emitted(id));
            s.targets.push(None);
            s.loss_mask.push(false);
        }
    }
    Ok((out, n))
}
