//! Pre-LN decoder-only transformer over unified token sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    add_bias, bias_grad, gelu_grad_with, gelu_tanh, gelu_with, layer_norm, layer_norm_backward, log_sum_exp, masked_softmax, LnCache,
};
use super::sequence::{SequenceSample, Slot};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::real::{gemm, matmul, matmul_nt, matmul_tn, Real, View, ViewMut};
use crate::resize::Resampler;
use crate::tokenizer::{lookup, Codebook};
use crate::vocab::UnifiedVocab;

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    tok: ParamId,
    pos: ParamId,
    scale_pos: Vec<ParamId>,
    end_pos: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    gen_w: ParamId,
    gen_b: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    /// Normal noise plus a 2D sinusoid of the cell centre for the first `h·w` rows.
    Grid { h: usize, w: usize, std: f64 },
    Zeros,
    Ones,
}

const GRID_AMPLITUDE: f64 = 0.1;

/// Position code of cell `(y, x)` in an `h × w` grid, from the cell centre in
/// unit coordinates, so cells covering the same image region at different
/// resolutions start out with similar codes.
fn grid_code(y: usize, x: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let f = (d / 4).max(1);
    let mut out = vec![0.0; d];
    for i in 0..f {
        let omega = std::f64::consts::PI * 16f64.powf(if f > 1 { i as f64 / (f - 1) as f64 } else { 0.0 });
        for (j, val) in [(omega * u).sin(), (omega * u).cos(), (omega * v).sin(), (omega * v).cos()].into_iter().enumerate() {
            if let Some(o) = out.get_mut(4 * i + j) {
                *o = GRID_AMPLITUDE * val;
            }
        }
    }
    out
}

/// Names, shapes and initializers of every parameter, in storage order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let std = 0.02;
    let resid = std / (2.0 * c.n_layers as f64).sqrt();
    let (lh, lw) = c.schedule.last();
    let mut s = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], Init::Normal(std)),
        // image patches lead the prompt and tile the same grid as the last scale
        ("pos_emb".to_string(), vec![c.max_prefix_len(), d], Init::Grid { h: lh, w: lw, std }),
    ];
    for (k, &(h, w)) in c.schedule.scales().iter().enumerate() {
        s.push((format!("scale_pos.{}", k + 1), vec![h * w, d], Init::Grid { h, w, std }));
    }
    s.push(("end_pos".into(), vec![1, d], Init::Normal(std)));
    s.push(("vision.weight".into(), vec![c.patch_dim, d], Init::Normal(std)));
    s.push(("vision.bias".into(), vec![d], Init::Zeros));
    s.push(("gen_proj.weight".into(), vec![c.latent_dim, d], Init::Normal(std)));
    s.push(("gen_proj.bias".into(), vec![d], Init::Zeros));
    for l in 0..c.n_layers {
        let p = format!("layer{l}");
        s.push((format!("{p}.ln1.gain"), vec![d], Init::Ones));
        s.push((format!("{p}.ln1.bias"), vec![d], Init::Zeros));
        s.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Init::Normal(std)));
        s.push((format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros));
        s.push((format!("{p}.attn.out.weight"), vec![d, d], Init::Normal(resid)));
        s.push((format!("{p}.attn.out.bias"), vec![d], Init::Zeros));
        s.push((format!("{p}.ln2.gain"), vec![d], Init::Ones));
        s.push((format!("{p}.ln2.bias"), vec![d], Init::Zeros));
        s.push((format!("{p}.mlp.fc.weight"), vec![d, c.ff_dim], Init::Normal(std)));
        s.push((format!("{p}.mlp.fc.bias"), vec![c.ff_dim], Init::Zeros));
        s.push((format!("{p}.mlp.proj.weight"), vec![c.ff_dim, d], Init::Normal(resid)));
        s.push((format!("{p}.mlp.proj.bias"), vec![d], Init::Zeros));
    }
    s.push(("ln_f.gain".into(), vec![d], Init::Ones));
    s.push(("ln_f.bias".into(), vec![d], Init::Zeros));
    s.push(("head.weight".into(), vec![d, c.vocab_size], Init::Normal(std)));
    s.push(("head.bias".into(), vec![c.vocab_size], Init::Zeros));
    s
}

fn resolve_ids(c: &ModelConfig) -> Ids {
    let k = c.schedule.len();
    let id = ParamId;
    let mut layers = Vec::with_capacity(c.n_layers);
    let base = 7 + k;
    for l in 0..c.n_layers {
        let o = base + 12 * l;
        layers.push(LayerIds {
            ln1_g: id(o),
            ln1_b: id(o + 1),
            qkv_w: id(o + 2),
            qkv_b: id(o + 3),
            out_w: id(o + 4),
            out_b: id(o + 5),
            ln2_g: id(o + 6),
            ln2_b: id(o + 7),
            fc_w: id(o + 8),
            fc_b: id(o + 9),
            proj_w: id(o + 10),
            proj_b: id(o + 11),
        });
    }
    let tail = base + 12 * c.n_layers;
    Ids {
        tok: id(0),
        pos: id(1),
        scale_pos: (0..k).map(|i| id(2 + i)).collect(),
        end_pos: id(2 + k),
        vis_w: id(3 + k),
        vis_b: id(4 + k),
        gen_w: id(5 + k),
        gen_b: id(6 + k),
        layers,
        lnf_g: id(tail),
        lnf_b: id(tail + 1),
        head_w: id(tail + 2),
        head_b: id(tail + 3),
    }
}

/// Whether AdamW should decay a parameter (matrices of linear layers only).
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Row-major `rows × vocab` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Embedded sequence plus the inputs of the two projectors, kept for backward.
#[derive(Clone, Debug)]
pub struct Embedded<T> {
    pub x: Vec<T>,
    patch_rows: Vec<usize>,
    patch_feats: Vec<T>,
    proj_rows: Vec<usize>,
    proj_feats: Vec<T>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    ln1_out: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2: LnCache<T>,
    ln2_out: Vec<T>,
    u: Vec<T>,
    tanh: Vec<T>,
    g: Vec<T>,
}

struct Trace<T> {
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hidden: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    ids: Ids,
    /// Entry `k − 2` resamples scale `k − 1` onto scale `k`.
    upsamplers: Vec<Resampler>,
    /// Final scale down to a single cell, feeding the closing slot.
    closer: Resampler,
}

impl<T: Real> Transformer<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            match init {
                Init::Normal(std) => params.normal(name, &shape, std, &mut rng),
                Init::Grid { h, w, std } => {
                    let id = params.normal(name, &shape, std, &mut rng);
                    let (rows, d) = (shape[0], shape[1]);
                    let t = params.get_mut(id);
                    for cell in 0..rows.min(h * w) {
                        for (a, g) in t[cell * d..(cell + 1) * d].iter_mut().zip(grid_code(cell / w, cell % w, h, w, d)) {
                            *a += T::lit(g);
                        }
                    }
                    id
                }
                Init::Zeros => params.zeros(name, &shape),
                Init::Ones => params.filled(name, &shape, 1.0),
            };
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} model tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(params.tensors()) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("model tensor {name}")));
        }
        let scales = config.schedule.scales();
        let upsamplers =
            scales.windows(2).map(|w| Resampler::new(w[0].0, w[0].1, w[1].0, w[1].1)).collect();
        let (lh, lw) = config.schedule.last();
        let closer = Resampler::new(lh, lw, 1, 1);
        let ids = resolve_ids(&config);
        Ok(Self { config, params, ids, upsamplers, closer })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    /// Generation projector weight (`D × d_model`) and bias.
    pub fn projector_ids(&self) -> (ParamId, ParamId) {
        (self.ids.gen_w, self.ids.gen_b)
    }

    fn check_inputs(&self, s: &SequenceSample, vocab: &UnifiedVocab, codebook: &Codebook) -> Result<()> {
        let c = &self.config;
        if vocab.size() != c.vocab_size {
            return Err(Error::Config(format!("vocab has {} ids, model expects {}", vocab.size(), c.vocab_size)));
        }
        if codebook.dim() != c.latent_dim || codebook.size() != vocab.visual_count() {
            return Err(Error::Dimension(format!(
                "codebook {}×{} does not fit model (D={}, V={})",
                codebook.size(),
                codebook.dim(),
                c.latent_dim,
                vocab.visual_count()
            )));
        }
        if s.is_empty() {
            return Err(Error::Config("empty sequence".into()));
        }
        if s.len() > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: s.len(), max: c.max_seq_len });
        }
        if s.prefix_len() > c.max_prefix_len() {
            return Err(Error::SequenceTooLong { len: s.prefix_len(), max: c.max_prefix_len() });
        }
        if s.patch_dim != c.patch_dim && s.slots.iter().any(|x| matches!(x, Slot::Patch(_))) {
            return Err(Error::Dimension(format!("patch width {} vs model {}", s.patch_dim, c.patch_dim)));
        }
        s.validate(&c.schedule, vocab)
    }

    /// Codebook vectors of `r_{k−1}` resampled onto scale `k` (`k ≥ 2`), or
    /// for `k = K + 1` the final map pooled to one cell.
    fn query_features(&self, s: &SequenceSample, codebook: &Codebook, k: usize) -> Result<Vec<T>> {
        let prev = s
            .visual_inputs
            .get(k - 2)
            .ok_or_else(|| Error::Schedule(format!("missing previous-scale map r_{}", k - 1)))?;
        let vecs: Vec<T> = lookup(codebook, &prev.indices)?.into_iter().map(|v| T::lit(v as f64)).collect();
        let r = if k - 2 < self.upsamplers.len() { &self.upsamplers[k - 2] } else { &self.closer };
        Ok(r.apply(&vecs, codebook.dim()))
    }

    /// Input vectors for every slot.
    pub fn embed_slots(&self, s: &SequenceSample, vocab: &UnifiedVocab, codebook: &Codebook) -> Result<Embedded<T>> {
        self.check_inputs(s, vocab, codebook)?;
        let c = &self.config;
        let (d, dim) = (c.d_model, c.latent_dim);
        let n = s.len();
        let p = &self.params;
        let mut x = vec![T::zero(); n * d];
        let mut patch_rows = Vec::new();
        let mut patch_feats = Vec::new();
        let mut proj_rows = Vec::new();
        let mut proj_feats = Vec::new();
        let mut feats_by_scale: Vec<Option<Vec<T>>> = vec![None; c.schedule.len() + 2];
        let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
        for (i, slot) in s.slots.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            match *slot {
                Slot::Patch(q) => {
                    patch_rows.push(i);
                    let pd = c.patch_dim;
                    patch_feats.extend(s.patches[q * pd..(q + 1) * pd].iter().map(|&v| T::lit(v as f64)));
                    add(row, &p.get(self.ids.pos)[i * d..(i + 1) * d]);
                }
                Slot::Text(t) => {
                    let t = t as usize;
                    add(row, &p.get(self.ids.tok)[t * d..(t + 1) * d]);
                    add(row, &p.get(self.ids.pos)[i * d..(i + 1) * d]);
                }
                Slot::GenStart => {
                    let t = vocab.gen_start_id() as usize;
                    add(row, &p.get(self.ids.tok)[t * d..(t + 1) * d]);
                    add(row, &p.get(self.ids.scale_pos[0])[..d]);
                }
                Slot::Query { scale, position } => {
                    if feats_by_scale[scale].is_none() {
                        feats_by_scale[scale] = Some(self.query_features(s, codebook, scale)?);
                    }
                    let f = feats_by_scale[scale].as_ref().expect("filled above");
                    proj_rows.push(i);
                    proj_feats.extend_from_slice(&f[position * dim..(position + 1) * dim]);
                    add(row, &p.get(self.ids.scale_pos[scale - 1])[position * d..(position + 1) * d]);
                }
                Slot::Emitted(t) => {
                    let (t, q) = (t as usize, i - s.prefix_len() - 1);
                    let last = *self.ids.scale_pos.last().expect("at least one scale");
                    add(row, &p.get(self.ids.tok)[t * d..(t + 1) * d]);
                    add(row, &p.get(last)[q * d..(q + 1) * d]);
                }
                Slot::GenEnd => {
                    let f = self.query_features(s, codebook, c.schedule.len() + 1)?;
                    proj_rows.push(i);
                    proj_feats.extend_from_slice(&f);
                    add(row, p.get(self.ids.end_pos));
                }
            }
        }
        self.project_rows(&mut x, &patch_rows, &patch_feats, c.patch_dim, self.ids.vis_w, self.ids.vis_b);
        self.project_rows(&mut x, &proj_rows, &proj_feats, dim, self.ids.gen_w, self.ids.gen_b);
        Ok(Embedded { x, patch_rows, patch_feats, proj_rows, proj_feats })
    }

    fn project_rows(&self, x: &mut [T], rows: &[usize], feats: &[T], width: usize, w: ParamId, b: ParamId) {
        if rows.is_empty() {
            return;
        }
        let d = self.config.d_model;
        let mut out = vec![T::zero(); rows.len() * d];
        matmul(feats, self.params.get(w), &mut out, rows.len(), width, d, false);
        add_bias(&mut out, self.params.get(b));
        for (r, &i) in rows.iter().enumerate() {
            for (a, &v) in x[i * d..(i + 1) * d].iter_mut().zip(&out[r * d..(r + 1) * d]) {
                *a += v;
            }
        }
    }

    fn layer_forward(&self, l: &LayerIds, x: Vec<T>, horizons: &[usize]) -> (Vec<T>, LayerCache<T>) {
        let c = &self.config;
        let (d, hcount, hd, ff) = (c.d_model, c.n_heads, c.head_dim(), c.ff_dim);
        let n = x.len() / d;
        let p = &self.params;

        let mut ln1_out = vec![T::zero(); n * d];
        let ln1 = layer_norm(&x, d, p.get(l.ln1_g), p.get(l.ln1_b), &mut ln1_out);
        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul(&ln1_out, p.get(l.qkv_w), &mut qkv, n, d, 3 * d, false);
        add_bias(&mut qkv, p.get(l.qkv_b));

        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); hcount * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..hcount {
            let q = View::cols_of(&qkv, n, 3 * d, h * hd, hd);
            let k = View::cols_of(&qkv, n, 3 * d, d + h * hd, hd);
            let v = View::cols_of(&qkv, n, 3 * d, 2 * d + h * hd, hd);
            let s = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(scale, q, k.t(), T::zero(), ViewMut::new(s, n, n));
            for (i, &last) in horizons.iter().enumerate() {
                masked_softmax(&mut s[i * n..(i + 1) * n], last);
            }
            gemm(T::one(), View::new(s, n, n), v, T::zero(), ViewMut::cols_of(&mut ctx, n, d, h * hd, hd));
        }
        let mut h = x;
        matmul(&ctx, p.get(l.out_w), &mut h, n, d, d, true);
        add_bias(&mut h, p.get(l.out_b));

        let mut ln2_out = vec![T::zero(); n * d];
        let ln2 = layer_norm(&h, d, p.get(l.ln2_g), p.get(l.ln2_b), &mut ln2_out);
        let mut u = vec![T::zero(); n * ff];
        matmul(&ln2_out, p.get(l.fc_w), &mut u, n, d, ff, false);
        add_bias(&mut u, p.get(l.fc_b));
        let tanh: Vec<T> = u.iter().map(|&v| gelu_tanh(v)).collect();
        let g: Vec<T> = u.iter().zip(&tanh).map(|(&v, &t)| gelu_with(v, t)).collect();
        let mut y = h;
        matmul(&g, p.get(l.proj_w), &mut y, n, ff, d, true);
        add_bias(&mut y, p.get(l.proj_b));

        (y, LayerCache { ln1, ln1_out, qkv, probs, ctx, ln2, ln2_out, u, tanh, g })
    }

    /// Runs the stack on precomputed input vectors with per-row attention
    /// horizons; returns final-norm hidden states.
    fn run(&self, x: Vec<T>, horizons: &[usize]) -> Trace<T> {
        let d = self.config.d_model;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut cur = x;
        for l in &self.ids.layers {
            let (y, cache) = self.layer_forward(l, cur, horizons);
            layers.push(cache);
            cur = y;
        }
        let mut hidden = vec![T::zero(); cur.len()];
        let lnf = layer_norm(&cur, d, self.params.get(self.ids.lnf_g), self.params.get(self.ids.lnf_b), &mut hidden);
        Trace { layers, lnf, hidden }
    }

    fn head(&self, hidden: &[T], rows: &[usize]) -> Logits<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            sel.extend_from_slice(&hidden[r * d..(r + 1) * d]);
        }
        let mut data = vec![T::zero(); rows.len() * v];
        matmul(&sel, self.params.get(self.ids.head_w), &mut data, rows.len(), d, v, false);
        add_bias(&mut data, self.params.get(self.ids.head_b));
        Logits { rows: rows.len(), vocab: v, data }
    }

    /// Logits for every position.
    pub fn forward(&self, s: &SequenceSample, vocab: &UnifiedVocab, codebook: &Codebook) -> Result<Logits<T>> {
        let rows: Vec<usize> = (0..s.len()).collect();
        self.logits_at(s, vocab, codebook, &rows)
    }

    /// Logits for the listed positions only.
    pub fn logits_at(
        &self,
        s: &SequenceSample,
        vocab: &UnifiedVocab,
        codebook: &Codebook,
        rows: &[usize],
    ) -> Result<Logits<T>> {
        let e = self.embed_slots(s, vocab, codebook)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= s.len()) {
            return Err(Error::IndexOutOfRange { index: r, limit: s.len() });
        }
        let trace = self.run(e.x, &s.horizons());
        let out = self.head(&trace.hidden, rows);
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out)
    }

    /// Logits from raw input vectors and horizons, bypassing slot embedding.
    pub fn forward_embedded(&self, x: Vec<T>, horizons: &[usize]) -> Result<Logits<T>> {
        let d = self.config.d_model;
        if x.len() != horizons.len() * d || horizons.iter().enumerate().any(|(i, &h)| h < i || h >= horizons.len()) {
            return Err(Error::Dimension("embedded input does not match horizons".into()));
        }
        let trace = self.run(x, horizons);
        let rows: Vec<usize> = (0..horizons.len()).collect();
        Ok(self.head(&trace.hidden, &rows))
    }

    /// Mean cross-entropy over supervised positions.
    pub fn loss(&self, s: &SequenceSample, vocab: &UnifiedVocab, codebook: &Codebook) -> Result<T> {
        let rows = supervised_rows(s)?;
        let logits = self.logits_at(s, vocab, codebook, &rows)?;
        Ok(mean_ce(&logits, &targets_of(s, &rows)).0)
    }

    /// Loss and a fresh gradient set.
    pub fn backward(&self, s: &SequenceSample, vocab: &UnifiedVocab, codebook: &Codebook) -> Result<(T, ParamSet<T>)> {
        let mut grads = self.params.zeros_like();
        let loss = self.accumulate_gradients(s, vocab, codebook, T::one(), &mut grads)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} (loss {:?})", loss)));
        }
        Ok((loss, grads))
    }

    /// Adds `weight ×` the gradient of this sample's loss into `grads`.
    pub fn accumulate_gradients(
        &self,
        s: &SequenceSample,
        vocab: &UnifiedVocab,
        codebook: &Codebook,
        weight: T,
        grads: &mut ParamSet<T>,
    ) -> Result<T> {
        self.params.check_layout(grads)?;
        let rows = supervised_rows(s)?;
        let e = self.embed_slots(s, vocab, codebook)?;
        let horizons = s.horizons();
        let Embedded { x, patch_rows, patch_feats, proj_rows, proj_feats } = e;
        let trace = self.run(x, &horizons);
        let logits = self.head(&trace.hidden, &rows);
        let targets = targets_of(s, &rows);
        let (loss, mut dlogits) = mean_ce(&logits, &targets);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss:?}")));
        }
        dlogits.iter_mut().for_each(|v| *v *= weight);

        let c = &self.config;
        let (d, vsize) = (c.d_model, c.vocab_size);
        let n = s.len();
        let p = &self.params;

        // head
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            sel.extend_from_slice(&trace.hidden[r * d..(r + 1) * d]);
        }
        matmul_tn(&sel, &dlogits, grads.get_mut(self.ids.head_w), d, rows.len(), vsize, true);
        bias_grad(&dlogits, grads.get_mut(self.ids.head_b));
        let mut dsel = vec![T::zero(); rows.len() * d];
        matmul_nt(&dlogits, p.get(self.ids.head_w), &mut dsel, rows.len(), vsize, d, false);
        let mut dhidden = vec![T::zero(); n * d];
        for (k, &r) in rows.iter().enumerate() {
            dhidden[r * d..(r + 1) * d].copy_from_slice(&dsel[k * d..(k + 1) * d]);
        }

        // final norm
        let mut dx = vec![T::zero(); n * d];
        {
            let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_backward(&dhidden, &trace.lnf, d, p.get(self.ids.lnf_g), &mut dg, &mut db, &mut dx);
            add_into(grads.get_mut(self.ids.lnf_g), &dg);
            add_into(grads.get_mut(self.ids.lnf_b), &db);
        }

        for (l, cache) in self.ids.layers.iter().zip(&trace.layers).rev() {
            dx = self.layer_backward(l, cache, dx, &horizons, grads);
        }

        self.embed_backward(s, vocab, &dx, &patch_rows, &patch_feats, &proj_rows, &proj_feats, grads);
        Ok(loss)
    }

    fn layer_backward(
        &self,
        l: &LayerIds,
        cache: &LayerCache<T>,
        dy: Vec<T>,
        horizons: &[usize],
        grads: &mut ParamSet<T>,
    ) -> Vec<T> {
        let c = &self.config;
        let (d, hcount, hd, ff) = (c.d_model, c.n_heads, c.head_dim(), c.ff_dim);
        let n = dy.len() / d;
        let p = &self.params;

        // MLP branch
        matmul_tn(&cache.g, &dy, grads.get_mut(l.proj_w), ff, n, d, true);
        bias_grad(&dy, grads.get_mut(l.proj_b));
        let mut du = vec![T::zero(); n * ff];
        matmul_nt(&dy, p.get(l.proj_w), &mut du, n, d, ff, false);
        for ((g, &u), &t) in du.iter_mut().zip(&cache.u).zip(&cache.tanh) {
            *g *= gelu_grad_with(u, t);
        }
        matmul_tn(&cache.ln2_out, &du, grads.get_mut(l.fc_w), d, n, ff, true);
        bias_grad(&du, grads.get_mut(l.fc_b));
        let mut dln2 = vec![T::zero(); n * d];
        matmul_nt(&du, p.get(l.fc_w), &mut dln2, n, ff, d, false);
        let mut dh = dy;
        {
            let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_backward(&dln2, &cache.ln2, d, p.get(l.ln2_g), &mut dg, &mut db, &mut dh);
            add_into(grads.get_mut(l.ln2_g), &dg);
            add_into(grads.get_mut(l.ln2_b), &db);
        }

        // attention branch
        matmul_tn(&cache.ctx, &dh, grads.get_mut(l.out_w), d, n, d, true);
        bias_grad(&dh, grads.get_mut(l.out_b));
        let mut dctx = vec![T::zero(); n * d];
        matmul_nt(&dh, p.get(l.out_w), &mut dctx, n, d, d, false);

        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        for h in 0..hcount {
            let qkv = &cache.qkv;
            let q = View::cols_of(qkv, n, 3 * d, h * hd, hd);
            let k = View::cols_of(qkv, n, 3 * d, d + h * hd, hd);
            let v = View::cols_of(qkv, n, 3 * d, 2 * d + h * hd, hd);
            let probs = &cache.probs[h * n * n..(h + 1) * n * n];
            let dout = View::cols_of(&dctx, n, d, h * hd, hd);
            gemm(T::one(), dout, v.t(), T::zero(), ViewMut::new(&mut dp, n, n));
            gemm(
                T::one(),
                View::new(probs, n, n).t(),
                dout,
                T::zero(),
                ViewMut::cols_of(&mut dqkv, n, 3 * d, 2 * d + h * hd, hd),
            );
            // softmax backward, restricted to the visible part of each row
            for (i, &last) in horizons.iter().enumerate() {
                let pr = &probs[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: T = pr[..=last].iter().zip(&dr[..=last]).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dr[j] = if j <= last { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                }
            }
            gemm(T::one(), View::new(&dp, n, n), k, T::zero(), ViewMut::cols_of(&mut dqkv, n, 3 * d, h * hd, hd));
            gemm(
                T::one(),
                View::new(&dp, n, n).t(),
                q,
                T::zero(),
                ViewMut::cols_of(&mut dqkv, n, 3 * d, d + h * hd, hd),
            );
        }
        matmul_tn(&cache.ln1_out, &dqkv, grads.get_mut(l.qkv_w), d, n, 3 * d, true);
        bias_grad(&dqkv, grads.get_mut(l.qkv_b));
        let mut dln1 = vec![T::zero(); n * d];
        matmul_nt(&dqkv, p.get(l.qkv_w), &mut dln1, n, 3 * d, d, false);
        let mut dx = dh;
        {
            let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_backward(&dln1, &cache.ln1, d, p.get(l.ln1_g), &mut dg, &mut db, &mut dx);
            add_into(grads.get_mut(l.ln1_g), &dg);
            add_into(grads.get_mut(l.ln1_b), &db);
        }
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn embed_backward(
        &self,
        s: &SequenceSample,
        vocab: &UnifiedVocab,
        dx: &[T],
        patch_rows: &[usize],
        patch_feats: &[T],
        proj_rows: &[usize],
        proj_feats: &[T],
        grads: &mut ParamSet<T>,
    ) {
        let c = &self.config;
        let d = c.d_model;
        for (i, slot) in s.slots.iter().enumerate() {
            let g = &dx[i * d..(i + 1) * d];
            match *slot {
                Slot::Patch(_) => add_into(&mut grads.get_mut(self.ids.pos)[i * d..(i + 1) * d], g),
                Slot::Text(t) => {
                    let t = t as usize;
                    add_into(&mut grads.get_mut(self.ids.tok)[t * d..(t + 1) * d], g);
                    add_into(&mut grads.get_mut(self.ids.pos)[i * d..(i + 1) * d], g);
                }
                Slot::GenStart => {
                    let t = vocab.gen_start_id() as usize;
                    add_into(&mut grads.get_mut(self.ids.tok)[t * d..(t + 1) * d], g);
                    add_into(&mut grads.get_mut(self.ids.scale_pos[0])[..d], g);
                }
                Slot::Query { scale, position } => {
                    let id = self.ids.scale_pos[scale - 1];
                    add_into(&mut grads.get_mut(id)[position * d..(position + 1) * d], g);
                }
                Slot::Emitted(t) => {
                    let (t, q) = (t as usize, i - s.prefix_len() - 1);
                    let last = *self.ids.scale_pos.last().expect("at least one scale");
                    add_into(&mut grads.get_mut(self.ids.tok)[t * d..(t + 1) * d], g);
                    add_into(&mut grads.get_mut(last)[q * d..(q + 1) * d], g);
                }
                Slot::GenEnd => add_into(grads.get_mut(self.ids.end_pos), g),
            }
        }
        let project = |grads: &mut ParamSet<T>, rows: &[usize], feats: &[T], width: usize, w: ParamId, b: ParamId| {
            if rows.is_empty() {
                return;
            }
            let mut gathered = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                gathered.extend_from_slice(&dx[r * d..(r + 1) * d]);
            }
            matmul_tn(feats, &gathered, grads.get_mut(w), width, rows.len(), d, true);
            bias_grad(&gathered, grads.get_mut(b));
        };
        project(grads, patch_rows, patch_feats, c.patch_dim, self.ids.vis_w, self.ids.vis_b);
        project(grads, proj_rows, proj_feats, c.latent_dim, self.ids.gen_w, self.ids.gen_b);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn supervised_rows(s: &SequenceSample) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..s.len()).filter(|&i| s.loss_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Config("no supervised positions in sequence".into()));
    }
    Ok(rows)
}

fn targets_of(s: &SequenceSample, rows: &[usize]) -> Vec<u32> {
    rows.iter().map(|&r| s.targets[r].expect("supervised row has a target")).collect()
}

/// Mean cross-entropy of `logits` rows against `targets`, with its gradient.
fn mean_ce<T: Real>(logits: &Logits<T>, targets: &[u32]) -> (T, Vec<T>) {
    let inv = T::one() / T::lit(targets.len() as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.data.len()];
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        total += lse - row[t as usize];
        let g = &mut grad[r * logits.vocab..(r + 1) * logits.vocab];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() * inv;
        }
        g[t as usize] -= inv;
    }
    (total * inv, grad)
}

/// Mean cross-entropy over the supervised positions of full-sequence logits.
pub fn cross_entropy<T: Real>(logits: &Logits<T>, s: &SequenceSample) -> Result<T> {
    if logits.rows != s.len() || s.targets.len() != s.len() {
        return Err(Error::Dimension(format!("{} logit rows for {} slots", logits.rows, s.len())));
    }
    let rows = supervised_rows(s)?;
    let targets = targets_of(s, &rows);
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.vocab) {
        return Err(Error::Token { id: t, reason: "target outside the vocabulary".into() });
    }
    let mut sel = Vec::with_capacity(rows.len() * logits.vocab);
    for &r in &rows {
        sel.extend_from_slice(logits.row(r));
    }
    let picked = Logits { rows: rows.len(), vocab: logits.vocab, data: sel };
    Ok(mean_ce(&picked, &targets).0)
}
