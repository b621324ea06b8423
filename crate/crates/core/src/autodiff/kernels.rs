//! Raw numeric kernels behind the tape ops.
//!
//! Convolutions go through im2col/col2im plus a GEMM. Batch loops run in
//! parallel; cross-sample reductions are accumulated in index order so results
//! are bit-identical regardless of thread count.

use super::Scalar;
use ndarray::{s, Array2, Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold one sample `[C, H, W]` into columns `[C*K*K, OH*OW]`.
pub fn im2col<F: Scalar>(x: &ArrayView3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((c_in * k * k, oh * ow));
    let xs = x.as_slice().expect("im2col: input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let row_base = row * oh * ow;
                for o_row in 0..oh {
                    let ih = (o_row * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let x_base = c * h * w + ih as usize * w;
                    let c_base = row_base + o_row * ow;
                    for o_col in 0..ow {
                        let iw = (o_col * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cs[c_base + o_col] = xs[x_base + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns `[C*K*K, OH*OW]` back into an image `[C, H, W]`, accumulating
/// overlapping contributions. Adjoint of [`im2col`].
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<F> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.shape(), &[c_in * k * k, oh * ow]);
    let mut x = ndarray::Array3::<F>::zeros((c_in, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im: cols must be standard layout");
    for c in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let row_base = row * oh * ow;
                for o_row in 0..oh {
                    let ih = (o_row * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let x_base = c * h * w + ih as usize * w;
                    let c_base = row_base + o_row * ow;
                    for o_col in 0..ow {
                        let iw = (o_col * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        xs[x_base + iw as usize] += cs[c_base + o_col];
                    }
                }
            }
        }
    }
    x
}

/// Batched convolution forward. `x: [N,C,H,W]`, `w: [OC,IC,K,K]` -> `[N,OC,OH,OW]`.
pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, win) = dims4(x);
    let (oc, wc, k, _) = dims4(w);
    assert_eq!(c_in, wc, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(win, k, stride, pad);
    let w_mat = w.to_shape((oc, c_in * k * k)).unwrap().to_owned();
    let mut out = Array4::<F>::zeros((n, oc, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out_i)| {
            let cols = im2col(&x.index_axis(Axis(0), i), k, stride, pad);
            let prod = w_mat.dot(&cols); // [OC, OH*OW]
            out_i.assign(&prod.into_shape_with_order((oc, oh, ow)).unwrap());
        });
    out
}

/// Convolution backward: returns `(dx, dw)`; either is skipped when not needed.
pub fn conv2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<F>>, Option<Array4<F>>) {
    let (n, c_in, h, win) = dims4(x);
    let (oc, _, k, _) = dims4(w);
    let (oh, ow) = (dout.shape()[2], dout.shape()[3]);
    let w_mat = w.to_shape((oc, c_in * k * k)).unwrap().to_owned();

    let per_sample: Vec<(Option<ndarray::Array3<F>>, Option<Array2<F>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dout_i = dout.index_axis(Axis(0), i);
            let dout_mat = dout_i.to_shape((oc, oh * ow)).unwrap().to_owned();
            let dx_i = need_dx.then(|| {
                let dcols = w_mat.t().dot(&dout_mat); // [IC*K*K, OH*OW]
                col2im(&dcols, c_in, h, win, k, stride, pad)
            });
            let dw_i = need_dw.then(|| {
                let cols = im2col(&x.index_axis(Axis(0), i), k, stride, pad);
                dout_mat.dot(&cols.t()) // [OC, IC*K*K]
            });
            (dx_i, dw_i)
        })
        .collect();

    let mut dx = need_dx.then(|| Array4::<F>::zeros((n, c_in, h, win)));
    let mut dw_mat = need_dw.then(|| Array2::<F>::zeros((oc, c_in * k * k)));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        if let (Some(dx), Some(dx_i)) = (dx.as_mut(), dx_i) {
            dx.index_axis_mut(Axis(0), i).assign(&dx_i);
        }
        if let (Some(acc), Some(dw_i)) = (dw_mat.as_mut(), dw_i) {
            *acc += &dw_i;
        }
    }
    let dw = dw_mat.map(|m| m.into_shape_with_order((oc, c_in, k, k)).unwrap());
    (dx, dw)
}

/// Transposed convolution forward. `x: [N,IC,H,W]`, `w: [IC,OC,K,K]` -> `[N,OC,OH,OW]`.
pub fn conv_transpose2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, win) = dims4(x);
    let (wic, oc, k, _) = dims4(w);
    assert_eq!(c_in, wic, "conv_transpose2d: channel mismatch");
    let oh = conv_transpose_out_dim(h, k, stride, pad);
    let ow = conv_transpose_out_dim(win, k, stride, pad);
    let w_mat = w.to_shape((c_in, oc * k * k)).unwrap().to_owned();
    let mut out = Array4::<F>::zeros((n, oc, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out_i)| {
            let x_i = x.index_axis(Axis(0), i);
            let x_mat = x_i.to_shape((c_in, h * win)).unwrap().to_owned();
            let cols = w_mat.t().dot(&x_mat); // [OC*K*K, H*W]
            // scatter with the same geometry a (k, stride, pad) conv on the
            // output would gather with
            out_i.assign(&col2im(&cols, oc, oh, ow, k, stride, pad));
        });
    out
}

/// Transposed convolution backward: returns `(dx, dw)`.
pub fn conv_transpose2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<F>>, Option<Array4<F>>) {
    let (n, c_in, h, win) = dims4(x);
    let (_, oc, k, _) = dims4(w);
    let w_mat = w.to_shape((c_in, oc * k * k)).unwrap().to_owned();

    let per_sample: Vec<(Option<ndarray::Array3<F>>, Option<Array2<F>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            // gathering im2col over dout is the adjoint of the forward scatter
            let dcols = im2col(&dout.index_axis(Axis(0), i), k, stride, pad); // [OC*K*K, H*W]
            let dx_i = need_dx.then(|| {
                let dx_mat = w_mat.dot(&dcols); // [IC, H*W]
                dx_mat.into_shape_with_order((c_in, h, win)).unwrap()
            });
            let dw_i = need_dw.then(|| {
                let x_i = x.index_axis(Axis(0), i);
                let x_mat = x_i.to_shape((c_in, h * win)).unwrap().to_owned();
                x_mat.dot(&dcols.t()) // [IC, OC*K*K]
            });
            (dx_i, dw_i)
        })
        .collect();

    let mut dx = need_dx.then(|| Array4::<F>::zeros((n, c_in, h, win)));
    let mut dw_mat = need_dw.then(|| Array2::<F>::zeros((c_in, oc * k * k)));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        if let (Some(dx), Some(dx_i)) = (dx.as_mut(), dx_i) {
            dx.index_axis_mut(Axis(0), i).assign(&dx_i);
        }
        if let (Some(acc), Some(dw_i)) = (dw_mat.as_mut(), dw_i) {
            *acc += &dw_i;
        }
    }
    let dw = dw_mat.map(|m| m.into_shape_with_order((c_in, oc, k, k)).unwrap());
    (dx, dw)
}

/// Non-overlapping average pooling; `H`, `W` must be divisible by `k`.
pub fn avg_pool2d<F: Scalar>(x: &ArrayView4<F>, k: usize) -> Array4<F> {
    let (n, c, h, w) = dims4(x);
    assert!(h % k == 0 && w % k == 0, "avg_pool2d: size not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let block = x.slice(s![ni, ci, i * k..(i + 1) * k, j * k..(j + 1) * k]);
                    out[[ni, ci, i, j]] = block.iter().copied().sum::<F>() * inv;
                }
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<F: Scalar>(dout: &ArrayView4<F>, k: usize) -> Array4<F> {
    let (n, c, oh, ow) = dims4(dout);
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let mut dx = Array4::<F>::zeros((n, c, oh * k, ow * k));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dout[[ni, ci, i, j]] * inv;
                    dx.slice_mut(s![ni, ci, i * k..(i + 1) * k, j * k..(j + 1) * k])
                        .mapv_inplace(|_| g);
                }
            }
        }
    }
    dx
}

/// 2x2 stride-1 average pool with replicate clamping at the border; output
/// keeps the input size. Used to smooth transpose-convolution outputs.
pub fn smooth_pool2x2<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = dims4(x);
    let quarter = F::from_f64(0.25);
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                let i1 = (i + 1).min(h - 1);
                for j in 0..w {
                    let j1 = (j + 1).min(w - 1);
                    out[[ni, ci, i, j]] = (x[[ni, ci, i, j]]
                        + x[[ni, ci, i, j1]]
                        + x[[ni, ci, i1, j]]
                        + x[[ni, ci, i1, j1]])
                        * quarter;
                }
            }
        }
    }
    out
}

pub fn smooth_pool2x2_backward<F: Scalar>(dout: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = dims4(dout);
    let quarter = F::from_f64(0.25);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                let i1 = (i + 1).min(h - 1);
                for j in 0..w {
                    let j1 = (j + 1).min(w - 1);
                    let g = dout[[ni, ci, i, j]] * quarter;
                    dx[[ni, ci, i, j]] += g;
                    dx[[ni, ci, i, j1]] += g;
                    dx[[ni, ci, i1, j]] += g;
                    dx[[ni, ci, i1, j1]] += g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<F: Scalar>(x: &ArrayView4<F>, factor: usize) -> Array4<F> {
    let (n, c, h, w) = dims4(x);
    let mut out = Array4::<F>::zeros((n, c, h * factor, w * factor));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h * factor {
                for j in 0..w * factor {
                    out[[ni, ci, i, j]] = x[[ni, ci, i / factor, j / factor]];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<F: Scalar>(dout: &ArrayView4<F>, factor: usize) -> Array4<F> {
    let (n, c, hf, wf) = dims4(dout);
    let (h, w) = (hf / factor, wf / factor);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..hf {
                for j in 0..wf {
                    dx[[ni, ci, i / factor, j / factor]] += dout[[ni, ci, i, j]];
                }
            }
        }
    }
    dx
}

/// Bilinear resize of a single-channel map (half-pixel centers). Plain array
/// utility, not a tape op.
pub fn bilinear_resize<F: Scalar>(x: &ndarray::ArrayView2<F>, oh: usize, ow: usize) -> Array2<F> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array2::<F>::zeros((oh, ow));
    for i in 0..oh {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = F::from_f64(fy - y0 as f64);
        for j in 0..ow {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = F::from_f64(fx - x0 as f64);
            let one = F::one();
            let top = x[[y0, x0]] * (one - tx) + x[[y0, x1]] * tx;
            let bot = x[[y1, x0]] * (one - tx) + x[[y1, x1]] * tx;
            out[[i, j]] = top * (one - ty) + bot * ty;
        }
    }
    out
}

pub fn dims4<F, S: ndarray::Data<Elem = F>>(a: &ndarray::ArrayBase<S, ndarray::Ix4>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}
