//! Row-wise building blocks with hand-written backward passes.

use crate::real::Real;

const LN_EPS: f64 = 1e-5;

/// Saved state of a layer norm over `rows × d`.
#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], d: usize, gain: &[T], bias: &[T], out: &mut [T]) -> LnCache<T> {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd }
}

/// Adds the input gradient into `dx` and accumulates gain/bias gradients.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let rows = dy.len() / d;
    let inv_d = T::lit(1.0 / d as f64);
    let mut g = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            g[c] = dyr[c] * gain[c];
            mean_g += g[c];
            mean_gx += g[c] * xh[c];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// The `tanh` term of the GELU approximation, shared by value and derivative.
pub fn gelu_tanh<T: Real>(x: T) -> T {
    (T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x)).tanh()
}

/// Tanh approximation of GELU given `t = gelu_tanh(x)`.
pub fn gelu_with<T: Real>(x: T, t: T) -> T {
    T::lit(0.5) * x * (T::one() + t)
}

pub fn gelu_grad_with<T: Real>(x: T, t: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// In-place softmax over `row[..=last]`; entries after `last` become zero.
pub fn masked_softmax<T: Real>(row: &mut [T], last: usize) {
    let live = &mut row[..=last];
    let max = live.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in live.iter_mut() {
        *v /= total;
    }
    for v in &mut row[last + 1..] {
        *v = T::zero();
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Adds `bias` to every row of `x` (`rows × d`).
pub fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates column sums of `dy` (`rows × d`) into `dbias`.
pub fn bias_grad<T: Real>(dy: &[T], dbias: &mut [T]) {
    for row in dy.chunks_exact(dbias.len()) {
        for (b, &g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
}
