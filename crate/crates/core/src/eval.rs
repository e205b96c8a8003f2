//! Segmentation metrics, the decoding-speed benchmark and per-scale reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Multiplicity, Sample};
use crate::error::{Error, Result};
use crate::inference::{decode_prefix_scales, finalize_mask, generate, generate_next_token_baseline, Sampling};
use crate::mask::BinaryMask;
use crate::model::Transformer;
use crate::tokenizer::Tokenizer;
use crate::vocab::UnifiedVocab;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub intersection: usize,
    pub union: usize,
}

impl PairCounts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            c.intersection += (p && g) as usize;
            c.union += (p || g) as usize;
        }
        Ok(c)
    }

    /// IoU with the empty-vs-empty case scored as 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(PairCounts::of(pred, gt)?.iou())
}

/// Cumulative IoU: total intersection over total union.
pub fn ciou(pairs: &[PairCounts]) -> Result<f64> {
    let (i, u) = pairs.iter().fold((0usize, 0usize), |(i, u), p| (i + p.intersection, u + p.union));
    if u == 0 {
        return Err(Error::Degenerate("cIoU is undefined when every union is empty".into()));
    }
    Ok(i as f64 / u as f64)
}

/// Mean per-pair IoU.
pub fn giou(pairs: &[PairCounts]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("gIoU of an empty dataset".into()));
    }
    Ok(pairs.iter().map(PairCounts::iou).sum::<f64>() / pairs.len() as f64)
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub instruction: String,
    pub multiplicity: Multiplicity,
    pub generated: bool,
    pub predicted_pixels: usize,
    pub target_pixels: usize,
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
    /// IoU after decoding only scales `1..=j`, for each `j`.
    pub scale_iou: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub giou: f64,
    /// `None` when every union is empty.
    pub ciou: Option<f64>,
    pub single_target_giou: Option<f64>,
    pub single_target_samples: usize,
    /// Fraction of no-target samples whose prediction is empty.
    pub no_target_accuracy: Option<f64>,
    pub no_target_samples: usize,
    /// Mean IoU after decoding scales `1..=j`, for each `j`.
    pub scale_iou: Vec<f64>,
}

/// Generates a mask for every sample and scores it against the ground truth.
pub fn evaluate(
    model: &Transformer<f32>,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
    samples: &[Sample],
    sampling: Sampling,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let k = tokenizer.schedule().len();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.scene.height, s.scene.width);
        let g = generate(model, tokenizer, vocab, &s.scene.render_planes(), &s.instruction, sampling)?;
        let gt = s.mask.binarize();
        let counts = PairCounts::of(&g.binary, &gt)?;
        let scale_iou = match &g.maps {
            Some(maps) => (1..=k)
                .map(|j| {
                    let m = decode_prefix_scales(maps, j, tokenizer)?;
                    iou(&finalize_mask(&m), &gt)
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![iou(&BinaryMask::empty(h, w), &gt)?; k],
        };
        records.push(EvalRecord {
            id: s.id,
            instruction: s.instruction.clone(),
            multiplicity: s.multiplicity(),
            generated: g.generated(),
            predicted_pixels: g.binary.count(),
            target_pixels: gt.count(),
            intersection: counts.intersection,
            union: counts.union,
            iou: counts.iou(),
            scale_iou,
        });
    }
    let summary = summarize(&records, k)?;
    Ok((records, summary))
}

pub fn summarize(records: &[EvalRecord], scales: usize) -> Result<EvalSummary> {
    let pairs: Vec<PairCounts> =
        records.iter().map(|r| PairCounts { intersection: r.intersection, union: r.union }).collect();
    let single: Vec<PairCounts> = records
        .iter()
        .zip(&pairs)
        .filter(|(r, _)| r.multiplicity == Multiplicity::One)
        .map(|(_, p)| *p)
        .collect();
    let none: Vec<&EvalRecord> = records.iter().filter(|r| r.multiplicity == Multiplicity::None).collect();
    let scale_iou = scale_refinement(records, scales)?;
    Ok(EvalSummary {
        samples: records.len(),
        giou: giou(&pairs)?,
        ciou: ciou(&pairs).ok(),
        single_target_giou: giou(&single).ok(),
        single_target_samples: single.len(),
        no_target_accuracy: (!none.is_empty())
            .then(|| none.iter().filter(|r| r.predicted_pixels == 0).count() as f64 / none.len() as f64),
        no_target_samples: none.len(),
        scale_iou,
    })
}

/// Mean IoU per decoded-scale prefix; the last entry equals gIoU.
pub fn scale_refinement(records: &[EvalRecord], scales: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Degenerate("refinement report of an empty dataset".into()));
    }
    let mut curve = vec![0.0; scales];
    for r in records {
        if r.scale_iou.len() != scales {
            return Err(Error::Dimension(format!("record {} has {} scale entries", r.id, r.scale_iou.len())));
        }
        for (c, v) in curve.iter_mut().zip(&r.scale_iou) {
            *c += v;
        }
    }
    Ok(curve.into_iter().map(|c| c / records.len() as f64).collect())
}

/// Per-scale mean IoU curve over an evaluation set.
pub fn scale_refinement_report(
    model: &Transformer<f32>,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
    samples: &[Sample],
) -> Result<Vec<f64>> {
    Ok(evaluate(model, tokenizer, vocab, samples, Sampling::Argmax)?.1.scale_iou)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    NextScale,
    NextTokenBaseline,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::NextScale => "next-scale",
            BenchMode::NextTokenBaseline => "next-token-baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub images: usize,
    /// Visual-generation forward passes per image.
    pub passes: usize,
    /// Visual tokens produced per image.
    pub tokens: usize,
    pub seconds_per_image: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "mode,passes,tokens,seconds_per_image";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6}", self.mode.name(), self.passes, self.tokens, self.seconds_per_image)
    }
}

/// Times visual decoding over `prompts` (scene raster, instruction).
pub fn bench_inference(
    model: &Transformer<f32>,
    tokenizer: &Tokenizer,
    vocab: &UnifiedVocab,
    prompts: &[(Vec<f32>, String)],
    mode: BenchMode,
) -> Result<BenchReport> {
    if prompts.is_empty() {
        return Err(Error::Config("bench needs at least one prompt".into()));
    }
    let mut passes = None;
    let mut tokens = 0;
    let start = Instant::now();
    for (planes, text) in prompts {
        let (p, t) = match mode {
            BenchMode::NextScale => {
                let g = generate(model, tokenizer, vocab, planes, text, Sampling::Argmax)?;
                let t = g.maps.as_ref().map_or(0, |m| m.token_count());
                (g.visual_passes, t)
            }
            BenchMode::NextTokenBaseline => {
                let (ids, p) = generate_next_token_baseline(model, tokenizer, vocab, planes, text)?;
                (p, ids.len())
            }
        };
        if *passes.get_or_insert(p) != p {
            return Err(Error::Config("pass count varied across images".into()));
        }
        tokens = t;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        mode,
        images: prompts.len(),
        passes: passes.unwrap_or(0),
        tokens,
        seconds_per_image: seconds / prompts.len() as f64,
    })
}
