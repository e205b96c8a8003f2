//! Separable bilinear resampling of channel-last grids.
//!
//! Upsampling uses half-pixel centres with edge clamping. Downsampling widens
//! the triangle kernel by the scale factor (antialiased bilinear), so a
//! coarse cell averages the whole footprint it covers rather than sampling
//! the two nearest source cells. Equal sizes give the identity.

use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
struct Axis {
    out: usize,
    inp: usize,
    /// Dense `out × inp` weights; rows sum to one.
    weights: Vec<f64>,
}

impl Axis {
    fn new(inp: usize, out: usize) -> Self {
        assert!(inp > 0 && out > 0, "resize axis must be non-empty");
        let mut weights = vec![0.0; out * inp];
        let scale = inp as f64 / out as f64;
        for i in 0..out {
            let row = &mut weights[i * inp..(i + 1) * inp];
            if scale > 1.0 {
                let centre = (i as f64 + 0.5) * scale;
                let mut total = 0.0;
                for (j, w) in row.iter_mut().enumerate() {
                    let d = ((j as f64 + 0.5) - centre).abs() / scale;
                    *w = (1.0 - d).max(0.0);
                    total += *w;
                }
                for w in row.iter_mut() {
                    *w /= total;
                }
            } else {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let j0 = (src.floor() as usize).min(inp - 1);
                let j1 = (j0 + 1).min(inp - 1);
                let frac = src - j0 as f64;
                row[j0] += 1.0 - frac;
                row[j1] += frac;
            }
        }
        Self { out, inp, weights }
    }
}

/// Linear map from an `in_h × in_w × C` grid to an `out_h × out_w × C` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    rows: Axis,
    cols: Axis,
}

impl Resampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { rows: Axis::new(in_h, out_h), cols: Axis::new(in_w, out_w) }
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows.inp, self.cols.inp)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.out, self.cols.out)
    }

    /// Weight of input cell `(p, q)` in output cell `(i, j)`.
    pub fn weight(&self, i: usize, j: usize, p: usize, q: usize) -> f64 {
        self.rows.weights[i * self.rows.inp + p] * self.cols.weights[j * self.cols.inp + q]
    }

    pub fn apply<T: Real>(&self, input: &[T], channels: usize) -> Vec<T> {
        let (ih, iw) = self.input_dims();
        let (oh, ow) = self.output_dims();
        assert_eq!(input.len(), ih * iw * channels, "resize input size");
        // columns first: ih × ow × C
        let mut tmp = vec![T::zero(); ih * ow * channels];
        for p in 0..ih {
            for j in 0..ow {
                let dst = &mut tmp[(p * ow + j) * channels..(p * ow + j + 1) * channels];
                for q in 0..iw {
                    let w = self.cols.weights[j * iw + q];
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::lit(w);
                    let src = &input[(p * iw + q) * channels..(p * iw + q + 1) * channels];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); oh * ow * channels];
        for i in 0..oh {
            for p in 0..ih {
                let w = self.rows.weights[i * ih + p];
                if w == 0.0 {
                    continue;
                }
                let w = T::lit(w);
                let src = &tmp[p * ow * channels..(p + 1) * ow * channels];
                let dst = &mut out[i * ow * channels..(i + 1) * ow * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Transpose of [`Resampler::apply`]; maps output-space gradients back.
    pub fn apply_adjoint<T: Real>(&self, grad_out: &[T], channels: usize) -> Vec<T> {
        let (ih, iw) = self.input_dims();
        let (oh, ow) = self.output_dims();
        assert_eq!(grad_out.len(), oh * ow * channels, "resize adjoint size");
        let mut tmp = vec![T::zero(); ih * ow * channels];
        for i in 0..oh {
            for p in 0..ih {
                let w = self.rows.weights[i * ih + p];
                if w == 0.0 {
                    continue;
                }
                let w = T::lit(w);
                let src = &grad_out[i * ow * channels..(i + 1) * ow * channels];
                let dst = &mut tmp[p * ow * channels..(p + 1) * ow * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mut out = vec![T::zero(); ih * iw * channels];
        for p in 0..ih {
            for j in 0..ow {
                let src = &tmp[(p * ow + j) * channels..(p * ow + j + 1) * channels];
                for q in 0..iw {
                    let w = self.cols.weights[j * iw + q];
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::lit(w);
                    let dst = &mut out[(p * iw + q) * channels..(p * iw + q + 1) * channels];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_size_is_identity() {
        let r = Resampler::new(3, 4, 3, 4);
        let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.37 - 1.0).collect();
        assert_eq!(r.apply(&x, 2), x);
    }

    #[test]
    fn rows_are_partitions_of_unity() {
        for (i, o) in [(1, 8), (2, 4), (8, 1), (8, 3), (5, 13), (16, 10)] {
            let a = Axis::new(i, o);
            for r in 0..o {
                let s: f64 = a.weights[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{i}->{o} row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn full_downsample_to_one_cell_averages_symmetrically() {
        let r = Resampler::new(2, 2, 1, 1);
        let out = r.apply(&[1.0f64, 2.0, 3.0, 4.0], 1);
        assert!((out[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn upsample_of_single_cell_broadcasts() {
        let r = Resampler::new(1, 1, 4, 4);
        assert!(r.apply(&[0.5f64, -1.0], 2).chunks(2).all(|c| c == [0.5, -1.0]));
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let r = Resampler::new(2, 3, 5, 4);
        let x: Vec<f64> = (0..6 * 2).map(|i| (i as f64 * 1.3).sin()).collect();
        let y: Vec<f64> = (0..20 * 2).map(|i| (i as f64 * 0.7).cos()).collect();
        let ax = r.apply(&x, 2);
        let aty = r.apply_adjoint(&y, 2);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
