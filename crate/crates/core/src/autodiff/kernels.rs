//! Slice-level numeric kernels shared by forward and backward passes.
//!
//! Every reduction accumulates left to right in index order, so results are
//! bitwise reproducible for a given input.

use crate::tensor::Element;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`
pub fn matmul_bt<T: Element>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // Row updates over a transposed copy keep the per-element summation order
    // (over `n`, ascending) while letting the inner loop vectorize.
    matmul(g, &transpose(b, k, n), m, n, k)
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`
pub fn matmul_at<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

pub fn transpose<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Element>(x: &[T], outer: usize, extent: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..extent {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..extent {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..extent {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Element>(
    y: &[T],
    gy: &[T],
    outer: usize,
    extent: usize,
    inner: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..extent {
                dot = dot + gy[at(j)] * y[at(j)];
            }
            for j in 0..extent {
                gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
            }
        }
    }
    gx
}

pub fn mean_axis<T: Element>(x: &[T], outer: usize, extent: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    let scale = T::one() / T::of(extent as f64);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::zero();
            for j in 0..extent {
                acc = acc + x[o * extent * inner + j * inner + i];
            }
            out[o * inner + i] = acc * scale;
        }
    }
    out
}

/// Normalized activations and reciprocal standard deviations of a last-axis layer norm.
pub struct LayerNormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
) -> (Vec<T>, LayerNormStats<T>) {
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::one() / T::of(cols as f64);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in xs {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in xs {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (xs[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LayerNormStats { xhat, rstd })
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward<T: Element>(
    gy: &[T],
    gamma: &[T],
    stats: &LayerNormStats<T>,
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = gy.len() / cols;
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); cols];
    let mut gbeta = vec![T::zero(); cols];
    let inv_n = T::one() / T::of(cols as f64);
    let mut ghat = vec![T::zero(); cols];
    for r in 0..rows {
        let base = r * cols;
        let mut sum_g = T::zero();
        let mut sum_gh = T::zero();
        for c in 0..cols {
            let g = gy[base + c];
            let h = stats.xhat[base + c];
            ggamma[c] = ggamma[c] + g * h;
            gbeta[c] = gbeta[c] + g;
            ghat[c] = g * gamma[c];
            sum_g = sum_g + ghat[c];
            sum_gh = sum_gh + ghat[c] * h;
        }
        let mean_g = sum_g * inv_n;
        let mean_gh = sum_gh * inv_n;
        for c in 0..cols {
            gx[base + c] =
                stats.rstd[r] * (ghat[c] - mean_g - stats.xhat[base + c] * mean_gh);
        }
    }
    (gx, ggamma, gbeta)
}

/// Geometry of a valid-mode strided 2-D convolution over an `H×W×C` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Flat input offset of element `(ky, kx, c)` in the patch at output position `(oy, ox)`.
    #[inline]
    fn offset(&self, oy: usize, ox: usize, ky: usize, kx: usize, c: usize) -> usize {
        let y = oy * self.stride + ky;
        let x = ox * self.stride + kx;
        (y * self.width + x) * self.channels + c
    }
}

/// Unfolds patches into rows of a `[positions × k·k·C]` matrix, row-major over the output grid.
pub fn im2col<T: Element>(x: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let mut cols = Vec::with_capacity(g.positions() * g.patch_len());
    for oy in 0..g.out_height() {
        for ox in 0..g.out_width() {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    for c in 0..g.channels {
                        cols.push(x[g.offset(oy, ox, ky, kx, c)]);
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Element>(gcols: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let mut gx = vec![T::zero(); g.height * g.width * g.channels];
    let mut idx = 0;
    for oy in 0..g.out_height() {
        for ox in 0..g.out_width() {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    for c in 0..g.channels {
                        let o = g.offset(oy, ox, ky, kx, c);
                        gx[o] = gx[o] + gcols[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    gx
}

/// Depthwise causal 1-D convolution over a `[len × channels]` sequence with
/// `weight[channels × width]`; tap `width-1` multiplies the current step.
pub fn causal_conv1d<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    len: usize,
    channels: usize,
    width: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); len * channels];
    for t in 0..len {
        for c in 0..channels {
            let mut acc = bias[c];
            for j in 0..width {
                // input index t - (width-1) + j, left-padded with zeros
                if let Some(src) = (t + j).checked_sub(width - 1) {
                    acc = acc + weight[c * width + j] * x[src * channels + c];
                }
            }
            y[t * channels + c] = acc;
        }
    }
    y
}

/// Returns `(gx, gweight, gbias)`.
pub fn causal_conv1d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    gy: &[T],
    len: usize,
    channels: usize,
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); len * channels];
    let mut gw = vec![T::zero(); channels * width];
    let mut gb = vec![T::zero(); channels];
    for t in 0..len {
        for c in 0..channels {
            let g = gy[t * channels + c];
            gb[c] = gb[c] + g;
            for j in 0..width {
                if let Some(src) = (t + j).checked_sub(width - 1) {
                    gw[c * width + j] = gw[c * width + j] + g * x[src * channels + c];
                    gx[src * channels + c] = gx[src * channels + c] + g * weight[c * width + j];
                }
            }
        }
    }
    (gx, gw, gb)
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones_is_inner_dimension() {
        let out = matmul(&[1.0f64; 6], &[1.0; 6], 2, 3, 2);
        assert_eq!(out, vec![3.0; 4]);
    }

    #[test]
    fn matmul_transposed_variants_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let g: Vec<f64> = (0..8).map(|v| (v as f64).cos()).collect(); // 2×4
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_bt(&g, &b, 2, 3, 4), matmul(&g, &bt, 2, 4, 3));
        let at = transpose(&a, 2, 3);
        let lhs = matmul_at(&a, &g, 2, 3, 4);
        let rhs = matmul(&at, &g, 3, 2, 4);
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let y = softmax(&[0.0f64; 3], 1, 3, 1);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu(0.0f64), 0.0);
    }

    #[test]
    fn causal_conv_only_looks_back() {
        // width 3, one channel, weights pick the current tap only
        let y = causal_conv1d(&[1.0f64, 2.0, 3.0], &[0.0, 0.0, 1.0], &[0.0], 3, 1, 3);
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
        // previous tap only: shifted right with zero fill
        let y = causal_conv1d(&[1.0f64, 2.0, 3.0], &[0.0, 1.0, 0.0], &[0.5], 3, 1, 3);
        assert_eq!(y, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = Conv2dGeometry {
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 1,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        // <im2col(x), y> == <x, col2im(y)>
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
