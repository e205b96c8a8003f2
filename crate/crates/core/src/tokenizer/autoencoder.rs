//! Toy convolutional VQ autoencoder over single-channel masks.
//!
//! The encoder halves resolution `log2(l)` times with 4×4 stride-2
//! convolutions and ends in a 1×1 projection to `D` channels. The decoder
//! mirrors it with nearest upsampling + 3×3 convolutions and a sigmoid.
//! Training quantizes with the same multi-scale residual recurrence used at
//! inference; gradients pass straight through the quantizer to the encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv2d, ConvNet, Op};
use super::quantize::{quantize_residual, reconstruct_with, Codebook, LatentGrid, MultiScaleTokenMaps, ScalePyramid, Schedule};
use crate::error::{Error, Result};
use crate::mask::MaskImage;
use crate::params::{cosine_lr, AdamW, AdamWConfig, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    /// Spatial downsampling factor `l`; must be a power of two ≥ 2.
    pub downsample: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Encoder channel width after each stride-2 stage.
    pub channels: Vec<usize>,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_dim: 8,
            codebook_size: 64,
            channels: vec![32, 64],
            schedule: Schedule::toy(),
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    /// Full-size setting: l = 16, D = 32, V = 4096 over the ten-scale schedule (256-pixel images).
    pub fn full() -> Self {
        Self {
            downsample: 16,
            latent_dim: 32,
            codebook_size: 4096,
            channels: vec![32, 64, 128, 256],
            schedule: Schedule::full_scale(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.downsample;
        if l < 2 || !l.is_power_of_two() {
            return Err(Error::Config(format!("downsample factor {l} must be a power of two >= 2")));
        }
        if self.channels.len() != l.trailing_zeros() as usize {
            return Err(Error::Config(format!(
                "{} channel widths for {} downsampling stages",
                self.channels.len(),
                l.trailing_zeros()
            )));
        }
        if self.latent_dim == 0 || self.codebook_size < 2 {
            return Err(Error::Config("latent_dim must be >= 1 and codebook_size >= 2".into()));
        }
        Ok(())
    }

    /// Image size implied by the last scale of the schedule.
    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.schedule.last();
        (h * self.downsample, w * self.downsample)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment: f64,
    /// Codes unused for this many steps are re-seeded from live residuals.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, lr: 2e-3, commitment: 0.25, restart_every: 50, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerStepLog {
    pub step: usize,
    pub lr: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub active_codes: usize,
}

/// Encoder, decoder and codebook. Immutable once trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    config: TokenizerConfig,
    params: ParamSet<f32>,
    encoder: ConvNet,
    decoder: ConvNet,
    codebook: Codebook,
    pyramid: ScalePyramid,
}

fn build_nets<R: Rng>(config: &TokenizerConfig, params: &mut ParamSet<f32>, rng: &mut R) -> (ConvNet, ConvNet) {
    let mut enc = Vec::new();
    let mut cin = 1;
    for (i, &c) in config.channels.iter().enumerate() {
        enc.push(Op::Conv(Conv2d::new(params, &format!("encoder.down{i}"), cin, c, 4, 2, 1, rng)));
        enc.push(Op::Relu);
        cin = c;
    }
    enc.push(Op::Conv(Conv2d::new(params, "encoder.proj", cin, config.latent_dim, 1, 1, 0, rng)));

    let mut dec = Vec::new();
    let widths: Vec<usize> = config.channels.iter().rev().copied().collect();
    dec.push(Op::Conv(Conv2d::new(params, "decoder.in", config.latent_dim, widths[0], 3, 1, 1, rng)));
    dec.push(Op::Relu);
    let mut cin = widths[0];
    for i in 0..widths.len() {
        let cout = if i + 1 < widths.len() { widths[i + 1] } else { (widths[i] / 2).max(1) };
        dec.push(Op::Upsample2);
        dec.push(Op::Conv(Conv2d::new(params, &format!("decoder.up{i}"), cin, cout, 3, 1, 1, rng)));
        dec.push(Op::Relu);
        cin = cout;
    }
    dec.push(Op::Conv(Conv2d::new(params, "decoder.out", cin, 1, 3, 1, 1, rng)));
    dec.push(Op::Sigmoid);
    (ConvNet { ops: enc }, ConvNet { ops: dec })
}

impl Tokenizer {
    /// Freshly initialised (untrained) tokenizer. All biases start at zero so
    /// the decoder maps a zero latent to a constant 0.5 raster.
    pub fn init(config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (encoder, decoder) = build_nets(&config, &mut params, &mut rng);
        let cb: Vec<f32> = (0..config.codebook_size * config.latent_dim)
            .map(|_| rng.gen_range(-0.5f32..0.5))
            .collect();
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, cb)?;
        let pyramid = ScalePyramid::new(&config.schedule);
        Ok(Self { config, params, encoder, decoder, codebook, pyramid })
    }

    /// Rebuilds a tokenizer from stored tensors (see `checkpoint`).
    pub fn from_parts(config: TokenizerConfig, params: ParamSet<f32>, codebook: Codebook) -> Result<Self> {
        let mut fresh = Self::init(config)?;
        fresh.params.check_layout(&params)?;
        if codebook.size() != fresh.codebook.size() || codebook.dim() != fresh.codebook.dim() {
            return Err(Error::Checkpoint("codebook shape does not match configuration".into()));
        }
        fresh.params = params;
        fresh.codebook = codebook;
        Ok(fresh)
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn schedule(&self) -> &Schedule {
        &self.config.schedule
    }

    pub fn pyramid(&self) -> &ScalePyramid {
        &self.pyramid
    }

    fn check_image(&self, image: &MaskImage) -> Result<()> {
        let l = self.config.downsample;
        if !image.height().is_multiple_of(l) || !image.width().is_multiple_of(l) {
            return Err(Error::Dimension(format!(
                "{}x{} image is not divisible by downsampling factor {l}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, image: &MaskImage) -> Result<LatentGrid> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let tr = self.encoder.forward(&self.params, image.pixels().to_vec(), 1, h, w, 1);
        LatentGrid::new(tr.out_h, tr.out_w, tr.out_c, tr.output)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<MaskImage> {
        if latent.dim != self.config.latent_dim {
            return Err(Error::Dimension(format!("latent D={} vs tokenizer D={}", latent.dim, self.config.latent_dim)));
        }
        let tr = self.decoder.forward(&self.params, latent.data.clone(), 1, latent.height, latent.width, latent.dim);
        let pixels = tr.output.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        MaskImage::new(tr.out_h, tr.out_w, pixels)
    }

    /// Mask → multi-scale token maps.
    pub fn tokenize(&self, image: &MaskImage) -> Result<MultiScaleTokenMaps> {
        let latent = self.encode(image)?;
        Ok(quantize_residual(&latent, &self.codebook, &self.pyramid)?.maps)
    }

    /// Token maps (possibly only the first few scales) → mask.
    pub fn detokenize(&self, maps: &MultiScaleTokenMaps) -> Result<MaskImage> {
        if maps.schedule != self.config.schedule {
            return Err(Error::Schedule("token maps use a different schedule".into()));
        }
        let latent = reconstruct_with(maps, &self.codebook, &self.pyramid)?;
        self.decode(&latent)
    }

    pub fn round_trip(&self, image: &MaskImage) -> Result<MaskImage> {
        self.detokenize(&self.tokenize(image)?)
    }
}

/// Stage-0 training: reconstruction L2 + codebook term + weighted commitment
/// term, straight-through gradients, dead-code re-seeding.
pub fn train_tokenizer(
    masks: &[MaskImage],
    config: TokenizerConfig,
    train: &TokenizerTrainConfig,
    mut log: impl FnMut(&TokenizerStepLog),
) -> Result<Tokenizer> {
    if masks.is_empty() {
        return Err(Error::Config("tokenizer training needs at least one mask".into()));
    }
    if train.steps == 0 || train.batch_size == 0 {
        return Err(Error::Config("tokenizer steps and batch_size must be positive".into()));
    }
    let mut tok = Tokenizer::init(config)?;
    let (h, w) = (masks[0].height(), masks[0].width());
    for m in masks {
        tok.check_image(m)?;
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Dimension("training masks must share one size".into()));
        }
    }
    let (lh, lw) = (h / tok.config.downsample, w / tok.config.downsample);
    if tok.config.schedule.last() != (lh, lw) {
        return Err(Error::Schedule(format!("schedule ends at {:?} but latents are {lh}x{lw}", tok.config.schedule.last())));
    }
    let d = tok.config.latent_dim;
    let v = tok.config.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);

    let mut cb_params = ParamSet::<f32>::new();
    let cb_id = cb_params.push("codebook", &[v, d], tok.codebook.vectors().to_vec());
    let adam_cfg = AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(&tok.params, adam_cfg, |_| false);
    let mut cb_opt = AdamW::new(&cb_params, adam_cfg, |_| false);
    let mut last_used = vec![0usize; v];
    let warmup = (train.steps / 20).max(1);
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut cursor = order.len();

    for step in 0..train.steps {
        let lr = cosine_lr(step, train.steps, warmup, train.lr, train.lr * 0.05);
        let mut batch_idx = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let b = batch_idx.len();
        let mut x = Vec::with_capacity(b * h * w);
        for &i in &batch_idx {
            x.extend_from_slice(masks[i].pixels());
        }

        let enc = tok.encoder.forward(&tok.params, x.clone(), b, h, w, 1);
        let cell = lh * lw * d;
        let mut fhat = vec![0.0f32; b * cell];
        let mut quantized = Vec::with_capacity(b);
        for bi in 0..b {
            let latent = LatentGrid::new(lh, lw, d, enc.output[bi * cell..(bi + 1) * cell].to_vec())?;
            let rq = quantize_residual(&latent, &tok.codebook, &tok.pyramid)?;
            fhat[bi * cell..(bi + 1) * cell].copy_from_slice(&rq.accumulated.data);
            quantized.push(rq);
        }

        let dec = tok.decoder.forward(&tok.params, fhat.clone(), b, lh, lw, d);
        let npix = (b * h * w) as f32;
        let mut recon = 0.0f64;
        let dxhat: Vec<f32> = dec
            .output
            .iter()
            .zip(&x)
            .map(|(&o, &t)| {
                recon += ((o - t) as f64).powi(2);
                2.0 * (o - t) / npix
            })
            .collect();
        recon /= npix as f64;

        let mut grads = tok.params.zeros_like();
        let dz = tok.decoder.backward(&tok.params, &dec, dxhat, b, &mut grads);

        let nlat = (b * cell) as f32;
        let beta = train.commitment as f32;
        let mut cb_loss = 0.0f64;
        let mut df = dz;
        let mut dfhat = vec![0.0f32; b * cell];
        for i in 0..b * cell {
            let diff = enc.output[i] - fhat[i];
            cb_loss += (diff as f64).powi(2);
            df[i] += 2.0 * beta * diff / nlat;
            dfhat[i] = -2.0 * diff / nlat;
        }
        cb_loss /= nlat as f64;
        if !recon.is_finite() || !cb_loss.is_finite() {
            return Err(Error::Diverged { step, reason: format!("tokenizer loss recon={recon} codebook={cb_loss}") });
        }
        tok.encoder.backward(&tok.params, &enc, df, b, &mut grads);

        let mut cb_grads = cb_params.zeros_like();
        {
            let gc = cb_grads.get_mut(cb_id);
            for (bi, rq) in quantized.iter().enumerate() {
                let g = &dfhat[bi * cell..(bi + 1) * cell];
                for (k, m) in rq.maps.maps.iter().enumerate() {
                    let gk = tok.pyramid.up(k).apply_adjoint(g, d);
                    for (c, &idx) in m.indices.iter().enumerate() {
                        last_used[idx as usize] = step;
                        let row = &mut gc[idx as usize * d..(idx as usize + 1) * d];
                        for (r, &gv) in row.iter_mut().zip(&gk[c * d..(c + 1) * d]) {
                            *r += gv;
                        }
                    }
                }
            }
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Diverged { step, reason: format!("non-finite gradient in {name}") });
        }
        opt.update(&mut tok.params, &grads, lr, &[]);
        cb_opt.update(&mut cb_params, &cb_grads, lr, &[]);

        // step 0 seeds every code from live residual targets; later restarts
        // only touch codes that went unused
        if step == 0 || (train.restart_every > 0 && step % train.restart_every == 0) {
            let pool: Vec<&[f32]> = quantized.iter().flat_map(|rq| rq.targets.iter().flat_map(|t| t.chunks_exact(d))).collect();
            let cb = cb_params.get_mut(cb_id);
            for code in 0..v {
                if step == 0 || step - last_used[code] >= train.restart_every {
                    let src = pool[rng.gen_range(0..pool.len())];
                    for (j, &s) in src.iter().enumerate() {
                        cb[code * d + j] = s + 0.01 * (rng.gen::<f32>() - 0.5);
                    }
                    last_used[code] = step;
                }
            }
        }
        tok.codebook.vectors_mut().copy_from_slice(cb_params.get(cb_id));

        let active = last_used.iter().filter(|&&s| s == step).count();
        log(&TokenizerStepLog { step, lr, reconstruction: recon, codebook: cb_loss, active_codes: active });
    }
    Ok(tok)
}
