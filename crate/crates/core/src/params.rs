//! Named parameter tensors and the AdamW optimizer that updates them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named tensors. Gradients use the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        let t = Tensor { name: name.into(), shape: shape.to_vec(), data };
        assert_eq!(t.numel(), t.data.len(), "tensor {} shape/data mismatch", t.name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::zero(); n])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::lit(v); n])
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(std * standard_normal(rng))).collect();
        self.push(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![T::zero(); t.data.len()] })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += scale * other` for identically laid-out sets.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())).map(|t| t.name.as_str())
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// Box-Muller standard normal draw.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Tensors whose names are rejected by the
/// decay filter (biases, norms, embeddings) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig, decay: impl Fn(&str) -> bool) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.tensors().iter().map(|t| decay(&t.name)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Tensors whose index is in
    /// `frozen` are skipped entirely.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64, frozen: &[ParamId]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (i, ((p, g), (m, v))) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()))
            .enumerate()
        {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let wd = if self.decay[i] { T::lit(lr * c.weight_decay) } else { T::zero() };
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                let upd = step_size * *m / denom + wd * *p;
                // lr == 0 must leave parameters bit-identical
                if upd != T::zero() {
                    *p -= upd;
                }
            }
        }
    }
}

/// Linear warmup to `max_lr`, then cosine decay to `min_lr` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    if warmup > 0 && step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("w", &[3], vec![0.1, -2.0, 3.5]);
        let before = ps.clone();
        let mut g = ps.zeros_like();
        g.get_mut(ParamId(0)).copy_from_slice(&[1.0, -1.0, 0.5]);
        let mut opt = AdamW::new(&ps, AdamWConfig::default(), |_| true);
        for _ in 0..5 {
            opt.update(&mut ps, &g, 0.0, &[]);
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.push("x", &[1], vec![5.0]);
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.0, ..Default::default() }, |_| false);
        for _ in 0..2000 {
            let mut g = ps.zeros_like();
            g.get_mut(id)[0] = 2.0 * ps.get(id)[0];
            opt.update(&mut ps, &g, 0.05, &[]);
        }
        assert!(ps.get(id)[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.push("a", &[1], vec![1.0]);
        let b = ps.push("b", &[1], vec![1.0]);
        let mut g = ps.zeros_like();
        g.get_mut(a)[0] = 1.0;
        g.get_mut(b)[0] = 1.0;
        let mut opt = AdamW::new(&ps, AdamWConfig::default(), |_| true);
        opt.update(&mut ps, &g, 0.1, &[b]);
        assert!(ps.get(a)[0] < 1.0);
        assert_eq!(ps.get(b)[0], 1.0);
    }

    #[test]
    fn cosine_schedule_shape() {
        let (total, warm) = (100, 10);
        assert!((cosine_lr(0, total, warm, 1.0, 0.0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(9, total, warm, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(10, total, warm, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(99, total, warm, 1.0, 0.0) < 1e-2);
        for s in warm..total - 1 {
            assert!(cosine_lr(s + 1, total, warm, 1.0, 0.0) <= cosine_lr(s, total, warm, 1.0, 0.0));
        }
    }
}
