//! Small channels-last convolutional stacks with hand-written backward passes.

use rand::Rng;

use crate::params::{ParamId, ParamSet};
use crate::real::{matmul, matmul_nt, matmul_tn, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let weight = params.normal(format!("{name}.weight"), &[kernel * kernel * cin, cout], (2.0 / fan_in).sqrt(), rng);
        let bias = params.zeros(format!("{name}.bias"), &[cout]);
        Self { weight, bias, cin, cout, kernel, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn im2col<T: Real>(&self, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let (k, c) = (self.kernel, self.cin);
        let mut cols = vec![T::zero(); batch * ho * wo * self.patch_len()];
        let mut row = 0;
        for b in 0..batch {
            let img = &x[b * h * w * c..(b + 1) * h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = &mut cols[row * self.patch_len()..(row + 1) * self.patch_len()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * w + ix as usize) * c;
                            let off = (ky * k + kx) * c;
                            dst[off..off + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let (k, c) = (self.kernel, self.cin);
        let mut dx = vec![T::zero(); batch * h * w * c];
        let mut row = 0;
        for b in 0..batch {
            let img = &mut dx[b * h * w * c..(b + 1) * h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = &dcols[row * self.patch_len()..(row + 1) * self.patch_len()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((iy as usize) * w + ix as usize) * c;
                            let off = (ky * k + kx) * c;
                            for (d, &s) in img[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &[T], batch: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let (ho, wo) = self.out_hw(h, w);
        let rows = batch * ho * wo;
        let cols = self.im2col(x, batch, h, w);
        let mut out = vec![T::zero(); rows * self.cout];
        let bias = params.get(self.bias);
        for r in out.chunks_exact_mut(self.cout) {
            r.copy_from_slice(bias);
        }
        matmul(&cols, params.get(self.weight), &mut out, rows, self.patch_len(), self.cout, true);
        (out, cols)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cols: &[T],
        dout: &[T],
        batch: usize,
        h: usize,
        w: usize,
        grads: &mut ParamSet<T>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let (ho, wo) = self.out_hw(h, w);
        let rows = batch * ho * wo;
        matmul_tn(cols, dout, grads.get_mut(self.weight), self.patch_len(), rows, self.cout, true);
        let db = grads.get_mut(self.bias);
        for r in dout.chunks_exact(self.cout) {
            for (g, &v) in db.iter_mut().zip(r) {
                *g += v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * self.patch_len()];
        matmul_nt(dout, params.get(self.weight), &mut dcols, rows, self.cout, self.patch_len(), false);
        Some(self.col2im(&dcols, batch, h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    Relu,
    /// Nearest-neighbour 2× upsampling.
    Upsample2,
    Sigmoid,
}

/// Activations recorded by [`ConvNet::forward`].
pub struct Trace<T> {
    inputs: Vec<(Vec<T>, usize, usize, usize)>,
    cols: Vec<Option<Vec<T>>>,
    pub output: Vec<T>,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub ops: Vec<Op>,
}

impl ConvNet {
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: Vec<T>, batch: usize, h: usize, w: usize, c: usize) -> Trace<T> {
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut all_cols = Vec::with_capacity(self.ops.len());
        let (mut cur, mut h, mut w, mut c) = (x, h, w, c);
        for op in &self.ops {
            let (next, nh, nw, nc, cols) = match op {
                Op::Conv(conv) => {
                    assert_eq!(conv.cin, c, "conv input channels");
                    let (ho, wo) = conv.out_hw(h, w);
                    let (out, cols) = conv.forward(params, &cur, batch, h, w);
                    (out, ho, wo, conv.cout, Some(cols))
                }
                Op::Relu => (cur.iter().map(|&v| v.max(T::zero())).collect(), h, w, c, None),
                Op::Sigmoid => (cur.iter().map(|&v| sigmoid(v)).collect(), h, w, c, None),
                Op::Upsample2 => (upsample2(&cur, batch, h, w, c), 2 * h, 2 * w, c, None),
            };
            inputs.push((cur, h, w, c));
            all_cols.push(cols);
            cur = next;
            h = nh;
            w = nw;
            c = nc;
        }
        Trace { inputs, cols: all_cols, output: cur, out_h: h, out_w: w, out_c: c }
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward<T: Real>(&self, params: &ParamSet<T>, trace: &Trace<T>, dout: Vec<T>, batch: usize, grads: &mut ParamSet<T>) -> Vec<T> {
        let mut g = dout;
        for (i, op) in self.ops.iter().enumerate().rev() {
            let (x, h, w, c) = &trace.inputs[i];
            g = match op {
                Op::Conv(conv) => conv
                    .backward(params, trace.cols[i].as_ref().expect("conv cols"), &g, batch, *h, *w, grads, true)
                    .expect("dx requested"),
                Op::Relu => g.iter().zip(x).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect(),
                Op::Sigmoid => g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| {
                        let s = sigmoid(v);
                        d * s * (T::one() - s)
                    })
                    .collect(),
                Op::Upsample2 => downsum2(&g, batch, *h, *w, *c),
            };
        }
        g
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn upsample2<T: Real>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); batch * oh * ow * c];
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * h + y / 2) * w + xx / 2) * c;
                let dst = ((b * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

fn downsum2<T: Real>(g: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); batch * h * w * c];
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let dst = ((b * h + y / 2) * w + xx / 2) * c;
                let src = ((b * oh + y) * ow + xx) * c;
                for (d, &s) in out[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                    *d += s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) -> ConvNet {
        ConvNet {
            ops: vec![
                Op::Conv(Conv2d::new(params, "a", 2, 3, 4, 2, 1, rng)),
                Op::Relu,
                Op::Upsample2,
                Op::Conv(Conv2d::new(params, "b", 3, 1, 3, 1, 1, rng)),
                Op::Sigmoid,
            ],
        }
    }

    #[test]
    fn strided_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new();
        let c = Conv2d::new(&mut ps, "c", 1, 4, 4, 2, 1, &mut rng);
        assert_eq!(c.out_hw(32, 32), (16, 16));
        let (out, _) = c.forward(&ps, &vec![0.0; 2 * 32 * 32], 2, 32, 32);
        assert_eq!(out.len(), 2 * 16 * 16 * 4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        let net = net(&mut ps, &mut rng);
        for t in ps.tensors_mut() {
            for v in &mut t.data {
                *v += 0.05 * crate::params::standard_normal(&mut rng);
            }
        }
        let (b, h, w, c) = (2, 4, 4, 2);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let target: Vec<f64> = (0..b * h * w).map(|i| (i % 3) as f64 / 2.0).collect();
        let loss = |ps: &ParamSet<f64>, x: &[f64]| -> f64 {
            let tr = net.forward(ps, x.to_vec(), b, h, w, c);
            tr.output.iter().zip(&target).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
        };
        let tr = net.forward(&ps, x.clone(), b, h, w, c);
        let dout: Vec<f64> = tr.output.iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        let mut grads = ps.zeros_like();
        let dx = net.backward(&ps, &tr, dout, b, &mut grads);

        let eps = 1e-6;
        for ti in 0..ps.len() {
            for j in 0..ps.tensors()[ti].data.len() {
                let mut p = ps.clone();
                p.tensors_mut()[ti].data[j] += eps;
                let up = loss(&p, &x);
                p.tensors_mut()[ti].data[j] -= 2.0 * eps;
                let down = loss(&p, &x);
                let num = (up - down) / (2.0 * eps);
                let ana = grads.tensors()[ti].data[j];
                assert!((num - ana).abs() <= 1e-6 + 1e-5 * num.abs(), "param {ti}[{j}]: {num} vs {ana}");
            }
        }
        for j in (0..x.len()).step_by(3) {
            let mut xp = x.clone();
            xp[j] += eps;
            let up = loss(&ps, &xp);
            xp[j] -= 2.0 * eps;
            let num = (up - loss(&ps, &xp)) / (2.0 * eps);
            assert!((num - dx[j]).abs() <= 1e-6 + 1e-5 * num.abs());
        }
    }
}
