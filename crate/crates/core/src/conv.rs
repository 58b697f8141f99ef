//! Dense 2-D convolution kernels (NCHW layout).
//!
//! Three primitives cover forward and every derivative the trainer needs:
//!
//! * [`conv2d`]            y[b,o,i,j]   = sum x[b,c,i*s-p+u, j*s-p+v] w[o,c,u,v]
//! * [`conv_transpose2d`]  y[b,o,i,j]   = sum over (i',j',u,v) with i = i'*s-p+u
//!                                         of x[b,c,i',j'] w[c,o,u,v]
//! * [`conv_wgrad`]        W[o,c,u,v]   = sum_b sum_(i',j') g[b,o,i',j'] x[b,c,i'*s-p+u, j'*s-p+v]
//!
//! The adjoint structure: d(conv2d)/dx is a transposed convolution with the
//! same weights, d(conv2d)/dw is `conv_wgrad(x, g)`, d(convT)/dx is a plain
//! convolution, d(convT)/dw is `conv_wgrad(g, x)` and the derivatives of
//! `conv_wgrad` itself land back on the first two. The autodiff graph relies
//! on this closure for second-order gradients.
//!
//! All three lower onto GEMM through an im2col buffer. Batch items are
//! independent, so the per-sample loops run under rayon; the weight-gradient
//! reduction over the batch is sequential to keep summation order, and hence
//! results, independent of thread scheduling.

use crate::scalar::Scalar;
use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rayon::prelude::*;

/// Output spatial size of a strided convolution (floor semantics).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a strided transposed convolution.
pub fn convt_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Gather conv patches of one sample into a `[C*kh*kw, Ho*Wo]` matrix.
fn im2col<F: Scalar>(
    x: &ArrayView2<F>, // [C, H*W] view of one sample
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        let plane = x.row(ci);
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let mut out_row = cols.row_mut(row);
                for i in 0..ho {
                    let src_i = (i * stride + u) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let src_j = (j * stride + v) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        out_row[i * wo + j] = plane[src_i as usize * w + src_j as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a `[C*kh*kw, Ho*Wo]` patch matrix back onto a `[C, H*W]` plane.
fn col2im_add<F: Scalar>(
    cols: &ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut2<F>, // [C, H*W]
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = cols.row((ci * kh + u) * kw + v);
                let mut plane = out.row_mut(ci);
                for i in 0..ho {
                    let dst_i = (i * stride + u) as isize - pad as isize;
                    if dst_i < 0 || dst_i >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let dst_j = (j * stride + v) as isize - pad as isize;
                        if dst_j < 0 || dst_j >= w as isize {
                            continue;
                        }
                        plane[dst_i as usize * w + dst_j as usize] += row[i * wo + j];
                    }
                }
            }
        }
    }
}

/// Strided convolution. `x: [B,C,H,W]`, `w: [O,C,kh,kw]` -> `[B,O,Ho,Wo]`.
pub fn conv2d<F: Scalar>(x: &ArrayView4<F>, w: &ArrayView4<F>, stride: usize, pad: usize) -> Array4<F> {
    let (b, c, h, wd) = x.dim();
    let (o, cw, kh, kw) = w.dim();
    assert_eq!(c, cw, "conv2d channel mismatch");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let wmat = w
        .to_shape((o, c * kh * kw))
        .expect("conv weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((b, o, ho, wo));
    let x_flat = x.to_shape((b, c, h * wd)).expect("conv input reshape");
    Zip::from(y.outer_iter_mut())
        .and(x_flat.outer_iter())
        .par_for_each(|mut yb, xb| {
            let cols = im2col(&xb, c, h, wd, kh, kw, stride, pad);
            let mut out = Array2::<F>::zeros((o, ho * wo));
            general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut out);
            yb.assign(&out.to_shape((o, ho, wo)).expect("conv output reshape"));
        });
    y
}

/// Strided transposed convolution. `x: [B,C,H,W]`, `w: [C,O,kh,kw]` -> `[B,O,Ho,Wo]`
/// where `Ho = (H-1)*stride + kh - 2*pad`.
pub fn conv_transpose2d<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, wd) = x.dim();
    let (cw, o, kh, kw) = w.dim();
    assert_eq!(c, cw, "conv_transpose2d channel mismatch");
    let ho = convt_out_dim(h, kh, stride, pad);
    let wo = convt_out_dim(wd, kw, stride, pad);
    // Patch matrix = W^T X, then scatter. The geometry mirrors im2col on the
    // output plane: conv_out_dim(ho) == h by construction.
    let wmat = w
        .to_shape((c, o * kh * kw))
        .expect("convT weight reshape")
        .to_owned();
    let mut y = Array4::<F>::zeros((b, o, ho, wo));
    let x_flat = x.to_shape((b, c, h * wd)).expect("convT input reshape");
    Zip::from(y.outer_iter_mut())
        .and(x_flat.outer_iter())
        .par_for_each(|mut yb, xb| {
            let mut cols = Array2::<F>::zeros((o * kh * kw, h * wd));
            general_mat_mul(F::one(), &wmat.t(), &xb, F::zero(), &mut cols);
            let mut flat = Array2::<F>::zeros((o, ho * wo));
            col2im_add(&cols.view(), o, ho, wo, kh, kw, stride, pad, &mut flat.view_mut());
            yb.assign(&flat.to_shape((o, ho, wo)).expect("convT output reshape"));
        });
    y
}

/// Weight gradient of a strided convolution:
/// `x: [B,C,H,W]`, `g: [B,O,Ho,Wo]` -> `[O,C,kh,kw]`.
///
/// Also serves as the weight gradient of a transposed convolution with the
/// roles of `x` and `g` swapped (yielding the `[C,O,kh,kw]` layout directly).
pub fn conv_wgrad<F: Scalar>(
    x: &ArrayView4<F>,
    g: &ArrayView4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, wd) = x.dim();
    let (bg, o, ho, wo) = g.dim();
    assert_eq!(b, bg, "conv_wgrad batch mismatch");
    assert_eq!(ho, conv_out_dim(h, kh, stride, pad), "conv_wgrad geometry");
    assert_eq!(wo, conv_out_dim(wd, kw, stride, pad), "conv_wgrad geometry");
    let x_flat = x.to_shape((b, c, h * wd)).expect("wgrad input reshape");
    let g_flat = g.to_shape((b, o, ho * wo)).expect("wgrad grad reshape");
    // Per-sample partials in parallel, summed in batch order afterwards so
    // the reduction is deterministic.
    let partials: Vec<Array2<F>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&x_flat.index_axis(Axis(0), bi), c, h, wd, kh, kw, stride, pad);
            let mut part = Array2::<F>::zeros((o, c * kh * kw));
            general_mat_mul(
                F::one(),
                &g_flat.index_axis(Axis(0), bi),
                &cols.t(),
                F::zero(),
                &mut part,
            );
            part
        })
        .collect();
    let mut acc = Array2::<F>::zeros((o, c * kh * kw));
    for part in partials {
        acc += &part;
    }
    acc.into_shape_with_order((o, c, kh, kw)).expect("wgrad reshape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv2d(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((b, o, ho, wo));
        for bi in 0..b {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let si = (i * stride + u) as isize - pad as isize;
                                    let sj = (j * stride + v) as isize - pad as isize;
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                                        acc += x[[bi, ci, si as usize, sj as usize]] * w[[oi, ci, u, v]];
                                    }
                                }
                            }
                        }
                        y[[bi, oi, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn naive_convt2d(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (_, o, kh, kw) = w.dim();
        let ho = convt_out_dim(h, kh, stride, pad);
        let wo = convt_out_dim(wd, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((b, o, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..wd {
                        for oi in 0..o {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let di = (i * stride + u) as isize - pad as isize;
                                    let dj = (j * stride + v) as isize - pad as isize;
                                    if di >= 0 && dj >= 0 && (di as usize) < ho && (dj as usize) < wo {
                                        y[[bi, oi, di as usize, dj as usize]] +=
                                            x[[bi, ci, i, j]] * w[[ci, oi, u, v]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn arange4(dims: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        Array4::from_shape_vec(dims, (0..n).map(|i| ((i * 37 % 19) as f64 - 9.0) * scale).collect())
            .unwrap()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = arange4((2, 3, 6, 5), 0.1);
            let w = arange4((4, 3, 3, 3), 0.05);
            let got = conv2d(&x.view(), &w.view(), stride, pad);
            let want = naive_conv2d(&x, &w, stride, pad);
            let max_diff = (&got - &want).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(max_diff < 1e-12, "stride={stride} pad={pad}: max diff {max_diff}");
        }
    }

    #[test]
    fn conv_transpose2d_matches_naive() {
        for &(stride, pad) in &[(1usize, 0usize), (2, 1), (2, 0)] {
            let x = arange4((2, 3, 4, 4), 0.1);
            let w = arange4((3, 5, 4, 4), 0.05);
            let got = conv_transpose2d(&x.view(), &w.view(), stride, pad);
            let want = naive_convt2d(&x, &w, stride, pad);
            let max_diff = (&got - &want).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(max_diff < 1e-12, "stride={stride} pad={pad}: max diff {max_diff}");
        }
    }

    #[test]
    fn dcgan_geometry_doubles_spatial_size() {
        assert_eq!(convt_out_dim(4, 4, 2, 1), 8);
        assert_eq!(convt_out_dim(32, 4, 2, 1), 64);
        assert_eq!(conv_out_dim(64, 4, 2, 1), 32);
        assert_eq!(conv_out_dim(8, 4, 2, 1), 4);
    }

    #[test]
    fn conv_wgrad_matches_loss_derivative() {
        // d/dw of <g, conv2d(x, w)> is conv_wgrad(x, g); check by finite differences.
        let x = arange4((2, 2, 5, 5), 0.1);
        let mut w = arange4((3, 2, 3, 3), 0.05);
        let g = arange4((2, 3, 2, 2), 0.2); // stride 2, pad 0: out 2x2
        let analytic = conv_wgrad(&x.view(), &g.view(), 3, 3, 2, 0);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let orig = w[idx];
            w[idx] = orig + eps;
            let up: f64 = (&conv2d(&x.view(), &w.view(), 2, 0) * &g).sum();
            w[idx] = orig - eps;
            let dn: f64 = (&conv2d(&x.view(), &w.view(), 2, 0) * &g).sum();
            w[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((analytic[idx] - fd).abs() < 1e-6, "idx {idx:?}: {} vs {fd}", analytic[idx]);
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <g, conv2d(x,w)> == <convT(g,w), x> for all shapes: the defining
        // adjoint identity behind the backward pass.
        let x = arange4((2, 3, 6, 6), 0.1);
        let w = arange4((4, 3, 4, 4), 0.05);
        let g = arange4((2, 4, 3, 3), 0.2); // stride 2 pad 1 on 6x6 -> 3x3
        let lhs: f64 = (&conv2d(&x.view(), &w.view(), 2, 1) * &g).sum();
        // The conv weight layout [O,C,kh,kw] reads as convT's [C_in,C_out,kh,kw].
        let back = conv_transpose2d(&g.view(), &w.view(), 2, 1);
        let rhs: f64 = (&back * &x).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
