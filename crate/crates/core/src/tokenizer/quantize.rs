//! Codebook lookup and multi-scale residual quantization.

use crate::error::{Error, Result};
use crate::resize::Resampler;

/// The shared `V × D` visual embedding table. Row `v` is visual token `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if size < 2 || dim < 1 {
            return Err(Error::Config(format!("codebook needs V >= 2 and D >= 1, got V={size} D={dim}")));
        }
        if vectors.len() != size * dim {
            return Err(Error::Dimension(format!("{} values for a {size}x{dim} codebook", vectors.len())));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Self { size, dim, vectors })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [f32] {
        &mut self.vectors
    }

    pub fn row(&self, v: usize) -> &[f32] {
        &self.vectors[v * self.dim..(v + 1) * self.dim]
    }

    /// Index of the nearest row in Euclidean distance; ties go to the lowest index.
    pub fn quantize_cell(&self, feature: &[f32]) -> Result<u32> {
        if feature.len() != self.dim {
            return Err(Error::Dimension(format!("feature of length {} for D={}", feature.len(), self.dim)));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature passed to quantize_cell".into()));
        }
        Ok(self.nearest(feature))
    }

    fn nearest(&self, feature: &[f32]) -> u32 {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (v, row) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d: f64 = row
                .iter()
                .zip(feature)
                .map(|(&c, &f)| {
                    let diff = f as f64 - c as f64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = v as u32;
            }
        }
        best
    }
}

/// An `h × w × D` feature grid, row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Dimension(format!("{} values for a {height}x{width}x{dim} latent", data.len())));
        }
        Ok(Self { height, width, dim, data })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self { height, width, dim, data: vec![0.0; height * width * dim] }
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
    }
}

/// Ordered per-scale grid sizes `(h_k, w_k)`, strictly increasing in area.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    scales: Vec<(usize, usize)>,
}

impl Schedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("schedule is empty".into()));
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Schedule("zero-sized scale".into()));
        }
        if scales.windows(2).any(|p| p[0].0 * p[0].1 >= p[1].0 * p[1].1) {
            return Err(Error::Schedule(format!("areas must strictly increase: {scales:?}")));
        }
        Ok(Self { scales })
    }

    /// Square schedule from side lengths.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    /// Desk-scale default: sides 1, 2, 4, 8 (85 tokens).
    pub fn toy() -> Self {
        Self::square(&[1, 2, 4, 8]).expect("valid toy schedule")
    }

    /// Ten scales ending at 16×16 (680 tokens), matching a 256-pixel image at l = 16.
    pub fn full_scale() -> Self {
        Self::square(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]).expect("valid full schedule")
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn last(&self) -> (usize, usize) {
        *self.scales.last().expect("non-empty schedule")
    }

    pub fn tokens_at(&self, k: usize) -> usize {
        let (h, w) = self.scales[k];
        h * w
    }

    pub fn total_tokens(&self) -> usize {
        self.scales.iter().map(|&(h, w)| h * w).sum()
    }

    /// Token offset of scale `k` in the flattened sequence.
    pub fn offset(&self, k: usize) -> usize {
        self.scales[..k].iter().map(|&(h, w)| h * w).sum()
    }

    /// Compact textual form, e.g. `1x1,2x2,4x4`.
    pub fn to_spec_string(&self) -> String {
        self.scales.iter().map(|(h, w)| format!("{h}x{w}")).collect::<Vec<_>>().join(",")
    }

    /// Parses `1,2,4,8` (square sides) or `1x1,2x3,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut scales = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::Schedule(format!("cannot parse scale '{part}'"));
            let (h, w) = match part.split_once('x') {
                Some((h, w)) => (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
                None => {
                    let s: usize = part.parse().map_err(|_| bad())?;
                    (s, s)
                }
            };
            scales.push((h, w));
        }
        Self::new(scales)
    }
}

/// One scale's index grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    /// 1-based scale position.
    pub scale_index: usize,
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
}

/// The `K` token maps `r_1 .. r_K` describing one latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiScaleTokenMaps {
    pub schedule: Schedule,
    pub maps: Vec<TokenMap>,
}

impl MultiScaleTokenMaps {
    pub fn new(schedule: Schedule, maps: Vec<TokenMap>) -> Result<Self> {
        if maps.len() > schedule.len() {
            return Err(Error::Schedule(format!("{} maps for a {}-scale schedule", maps.len(), schedule.len())));
        }
        for (k, m) in maps.iter().enumerate() {
            let (h, w) = schedule.scales()[k];
            if m.height != h || m.width != w || m.indices.len() != h * w || m.scale_index != k + 1 {
                return Err(Error::Schedule(format!("map {} does not match scale {h}x{w}", k + 1)));
            }
        }
        Ok(Self { schedule, maps })
    }

    pub fn token_count(&self) -> usize {
        self.maps.iter().map(|m| m.indices.len()).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.maps.len() == self.schedule.len()
    }

    /// Keeps only the first `j` scales.
    pub fn truncated(&self, j: usize) -> Self {
        Self { schedule: self.schedule.clone(), maps: self.maps[..j.min(self.maps.len())].to_vec() }
    }

    pub fn check_indices(&self, vocab_size: usize) -> Result<()> {
        for m in &self.maps {
            if let Some(&bad) = m.indices.iter().find(|&&i| i as usize >= vocab_size) {
                return Err(Error::IndexOutOfRange { index: bad as usize, limit: vocab_size });
            }
        }
        Ok(())
    }
}

/// Per-schedule resampling operators between each scale and the full grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    schedule: Schedule,
    down: Vec<Resampler>,
    up: Vec<Resampler>,
}

impl ScalePyramid {
    pub fn new(schedule: &Schedule) -> Self {
        let (fh, fw) = schedule.last();
        Self {
            schedule: schedule.clone(),
            down: schedule.scales().iter().map(|&(h, w)| Resampler::new(fh, fw, h, w)).collect(),
            up: schedule.scales().iter().map(|&(h, w)| Resampler::new(h, w, fh, fw)).collect(),
        }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn down(&self, k: usize) -> &Resampler {
        &self.down[k]
    }

    pub fn up(&self, k: usize) -> &Resampler {
        &self.up[k]
    }
}

/// Result of the residual recurrence, including the running reconstruction
/// accumulated inside the quantizer.
#[derive(Clone, Debug)]
pub struct ResidualQuantization {
    pub maps: MultiScaleTokenMaps,
    pub accumulated: LatentGrid,
    /// Down-sampled residual each scale was asked to quantize.
    pub targets: Vec<Vec<f32>>,
}

pub fn lookup(codebook: &Codebook, indices: &[u32]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(indices.len() * codebook.dim());
    for &i in indices {
        if i as usize >= codebook.size() {
            return Err(Error::IndexOutOfRange { index: i as usize, limit: codebook.size() });
        }
        out.extend_from_slice(codebook.row(i as usize));
    }
    Ok(out)
}

fn check_latent(latent: &LatentGrid, codebook: &Codebook, schedule: &Schedule) -> Result<()> {
    if schedule.last() != (latent.height, latent.width) {
        return Err(Error::Schedule(format!(
            "last scale {:?} does not match latent {}x{}",
            schedule.last(),
            latent.height,
            latent.width
        )));
    }
    if latent.dim != codebook.dim() {
        return Err(Error::Dimension(format!("latent D={} vs codebook D={}", latent.dim, codebook.dim())));
    }
    if latent.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    Ok(())
}

/// Residual multi-scale quantization: at each scale, down-sample the current
/// residual, quantize every cell, up-sample the looked-up vectors back to full
/// resolution and subtract them.
pub fn quantize_residual(latent: &LatentGrid, codebook: &Codebook, pyramid: &ScalePyramid) -> Result<ResidualQuantization> {
    let schedule = pyramid.schedule();
    check_latent(latent, codebook, schedule)?;
    let d = latent.dim;
    let mut residual = latent.data.clone();
    let mut acc = vec![0.0f32; residual.len()];
    let mut maps = Vec::with_capacity(schedule.len());
    let mut targets = Vec::with_capacity(schedule.len());
    for (k, &(h, w)) in schedule.scales().iter().enumerate() {
        let coarse = pyramid.down(k).apply(&residual, d);
        let indices: Vec<u32> = coarse.chunks_exact(d).map(|cell| codebook.nearest(cell)).collect();
        let contribution = pyramid.up(k).apply(&lookup(codebook, &indices)?, d);
        for ((r, a), c) in residual.iter_mut().zip(acc.iter_mut()).zip(&contribution) {
            *r -= c;
            *a += c;
        }
        maps.push(TokenMap { scale_index: k + 1, height: h, width: w, indices });
        targets.push(coarse);
    }
    Ok(ResidualQuantization {
        maps: MultiScaleTokenMaps { schedule: schedule.clone(), maps },
        accumulated: LatentGrid { height: latent.height, width: latent.width, dim: d, data: acc },
        targets,
    })
}

pub fn multi_scale_quantize(latent: &LatentGrid, codebook: &Codebook, schedule: &Schedule) -> Result<MultiScaleTokenMaps> {
    Ok(quantize_residual(latent, codebook, &ScalePyramid::new(schedule))?.maps)
}

/// Sum of up-sampled codebook lookups over whichever scales are present.
/// Missing trailing scales contribute nothing.
pub fn multi_scale_reconstruct(maps: &MultiScaleTokenMaps, codebook: &Codebook) -> Result<LatentGrid> {
    reconstruct_with(maps, codebook, &ScalePyramid::new(&maps.schedule))
}

pub fn reconstruct_with(maps: &MultiScaleTokenMaps, codebook: &Codebook, pyramid: &ScalePyramid) -> Result<LatentGrid> {
    let (fh, fw) = maps.schedule.last();
    let d = codebook.dim();
    let mut acc = vec![0.0f32; fh * fw * d];
    for (k, m) in maps.maps.iter().enumerate() {
        let contribution = pyramid.up(k).apply(&lookup(codebook, &m.indices)?, d);
        for (a, c) in acc.iter_mut().zip(&contribution) {
            *a += c;
        }
    }
    LatentGrid::new(fh, fw, d, acc)
}
