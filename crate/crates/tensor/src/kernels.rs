//! Forward kernels behind the autodiff ops. All shapes are validated by the
//! graph layer before these are called.

use crate::par;
use crate::tensor::numel;
use crate::Tensor;

/// Row-major `c = op(a) * op(b)` (+ `c` when `accumulate`), with `a` of
/// logical shape `m x k` and `b` of logical shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
    out
}

pub(crate) fn transpose2d(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    let src = a.data();
    let dst = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Stride and zero padding of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(x_shape: &[usize], w_shape: &[usize], geom: ConvGeom) -> Self {
        let (n, ci, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (co, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
        let ho = geom.out_len(h, kh).expect("validated conv geometry");
        let wo = geom.out_len(w, kw).expect("validated conv geometry");
        Self {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
        }
    }

    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let plane = d.col_cols();
    for c in 0..d.ci {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let y = (oy * geom.stride + i) as isize - geom.pad as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if y < 0 || y >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * d.h + y as usize) * d.w..(c * d.h + y as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * geom.stride + j) as isize - geom.pad as isize;
                        *v = if xx < 0 || xx >= d.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeom, x: &mut [f64]) {
    let plane = d.col_cols();
    for c in 0..d.ci {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let y = (oy * geom.stride + i) as isize - geom.pad as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let base = (c * d.h + y as usize) * d.w;
                    for ox in 0..d.wo {
                        let xx = (ox * geom.stride + j) as isize - geom.pad as isize;
                        if xx >= 0 && xx < d.w as isize {
                            x[base + xx as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n, co] = sum_ci w[co, ci] (*) x[n, ci]` (cross-correlation).
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let d = ConvDims::new(x.shape(), w.shape(), geom);
    let mut out = Tensor::zeros(&[d.n, d.co, d.ho, d.wo]);
    let in_len = d.ci * d.h * d.w;
    let out_len = d.co * d.col_cols();
    let xd = x.data();
    let wd = w.data();
    par::for_each_chunk_mut(out.data_mut(), out_len, |n, o| {
        let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
        im2col(&xd[n * in_len..(n + 1) * in_len], &d, geom, &mut cols);
        gemm(d.co, d.col_rows(), d.col_cols(), wd, false, &cols, false, o, false);
    });
    out
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped gradient back to
/// an input-shaped one.
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, x_shape: &[usize], geom: ConvGeom) -> Tensor {
    let d = ConvDims::new(x_shape, w.shape(), geom);
    let mut out = Tensor::zeros(x_shape);
    let in_len = d.ci * d.h * d.w;
    let out_len = d.co * d.col_cols();
    let gd = g.data();
    let wd = w.data();
    par::for_each_chunk_mut(out.data_mut(), in_len, |n, o| {
        let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
        gemm(
            d.col_rows(),
            d.co,
            d.col_cols(),
            wd,
            true,
            &gd[n * out_len..(n + 1) * out_len],
            false,
            &mut cols,
            false,
        );
        col2im(&cols, &d, geom, o);
    });
    out
}

/// Adjoint of [`conv2d`] in its weights.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, w_shape: &[usize], geom: ConvGeom) -> Tensor {
    let d = ConvDims::new(x.shape(), w_shape, geom);
    let in_len = d.ci * d.h * d.w;
    let out_len = d.co * d.col_cols();
    let wlen = numel(w_shape);
    let xd = x.data();
    let gd = g.data();
    let partials = par::map_range(d.n, |n| {
        let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
        im2col(&xd[n * in_len..(n + 1) * in_len], &d, geom, &mut cols);
        let mut part = vec![0.0; wlen];
        gemm(
            d.co,
            d.col_cols(),
            d.col_rows(),
            &gd[n * out_len..(n + 1) * out_len],
            false,
            &cols,
            true,
            &mut part,
            false,
        );
        part
    });
    let mut out = Tensor::zeros(w_shape);
    // Fixed-order reduction keeps sequential and parallel runs bit-identical.
    for part in partials {
        for (o, p) in out.data_mut().iter_mut().zip(part) {
            *o += p;
        }
    }
    out
}

/// Separable linear resampling of the last two axes: `Y = Ry X Rx^T` per plane.
pub(crate) fn resample(x: &Tensor, ry: &Tensor, rx: &Tensor) -> Tensor {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let (ho, wo) = (ry.shape()[0], rx.shape()[0]);
    let planes = x.len() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = ho;
    shape[nd - 1] = wo;
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    par::for_each_chunk_mut(out.data_mut(), ho * wo, |p, o| {
        let mut tmp = vec![0.0; h * wo];
        gemm(h, w, wo, &xd[p * h * w..(p + 1) * h * w], false, rx.data(), true, &mut tmp, false);
        gemm(ho, h, wo, ry.data(), false, &tmp, false, o, false);
    });
    debug_assert_eq!(planes * ho * wo, out.len());
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sum over `axes`, keeping them as size-1 dimensions.
pub(crate) fn sum_axes(x: &Tensor, axes: &[usize]) -> Tensor {
    let mut out_shape = x.shape().to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut out = Tensor::zeros(&out_shape);
    let in_strides = strides(x.shape());
    let out_strides = strides(&out_shape);
    let od = out.data_mut();
    for (flat, v) in x.data().iter().enumerate() {
        let mut rem = flat;
        let mut o = 0;
        for d in 0..in_strides.len() {
            let idx = rem / in_strides[d];
            rem %= in_strides[d];
            if out_shape[d] != 1 {
                o += idx * out_strides[d];
            }
        }
        od[o] += v;
    }
    out
}

/// Broadcast size-1 dimensions of `x` up to `shape`.
pub(crate) fn expand(x: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let out_strides = strides(shape);
    let in_strides = strides(x.shape());
    let xs = x.shape().to_vec();
    let xd = x.data();
    for (flat, v) in out.data_mut().iter_mut().enumerate() {
        let mut rem = flat;
        let mut i = 0;
        for d in 0..out_strides.len() {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            if xs[d] != 1 {
                i += idx * in_strides[d];
            }
        }
        *v = xd[i];
    }
    out
}

/// Window `[top, top+h) x [left, left+w)` of the last two axes.
pub(crate) fn crop(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let nd = x.ndim();
    let (hh, ww) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let planes = x.len() / (hh * ww);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = h;
    shape[nd - 1] = w;
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..planes {
        for r in 0..h {
            let src = p * hh * ww + (top + r) * ww + left;
            let dst = p * h * w + r * w;
            od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    out
}

/// Place `x` into a zero tensor whose last two axes are `(hh, ww)`.
pub(crate) fn embed(x: &Tensor, top: usize, left: usize, hh: usize, ww: usize) -> Tensor {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let planes = x.len() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = hh;
    shape[nd - 1] = ww;
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..planes {
        for r in 0..h {
            let dst = p * hh * ww + (top + r) * ww + left;
            let src = p * h * w + r * w;
            od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
        let (n, ci, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = geom.out_len(h, kh).unwrap();
        let wo = geom.out_len(ww, kw).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let y = (oy * geom.stride + i) as isize - geom.pad as isize;
                                    let xx = (ox * geom.stride + j) as isize - geom.pad as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= ww as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * kh + i) * kw + j]
                                        * x.data()[((b * ci + c) * h + y as usize) * ww + xx as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let geom = ConvGeom::new(stride, pad);
            let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut r);
            let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
            let fast = conv2d(&x, &w, geom);
            let slow = naive_conv(&x, &w, geom);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, conv_input_grad(g, w)> = <w, conv_weight_grad(x, g)>
        let mut r = rng();
        let geom = ConvGeom::new(2, 1);
        let x = Tensor::randn(&[2, 3, 9, 8], 1.0, &mut r);
        let w = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut r);
        let y = conv2d(&x, &w, geom);
        let g = Tensor::randn(y.shape(), 1.0, &mut r);
        let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum() };
        let lhs = dot(&y, &g);
        let gx = conv2d_input_grad(&g, &w, x.shape(), geom);
        let gw = conv2d_weight_grad(&x, &g, w.shape(), geom);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn sum_axes_and_expand_are_adjoint() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
        let s = sum_axes(&x, &[0, 2, 3]);
        assert_eq!(s.shape(), &[1, 3, 1, 1]);
        let manual: f64 = (0..2)
            .flat_map(|n| (0..20).map(move |k| (n, k)))
            .map(|(n, k)| x.data()[n * 60 + 20 + k])
            .sum();
        assert!((s.data()[1] - manual).abs() < 1e-12);
        let e = expand(&s, x.shape());
        assert_eq!(e.data()[60 + 20 + 7], s.data()[1]);
    }

    #[test]
    fn crop_then_embed_restores_window() {
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let c = crop(&x, 1, 2, 2, 2);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        let e = embed(&c, 1, 2, 4, 4);
        assert_eq!(e.data()[6], 6.0);
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.sum(), 34.0);
    }
}
