//! 2-D convolution via im2col and per-sample matrix products.
//!
//! Stride-1 input gradients are computed as a convolution with flipped
//! kernels (another im2col + gemm) instead of a scatter, and 1x1 kernels
//! skip column lowering entirely.

use super::Float;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3};

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// Weights, shape `(out_channels, in_channels, k, k)`.
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

impl<F: Float> Conv2dGrad<F> {
    pub fn zeros_like(layer: &Conv2d<F>) -> Self {
        Conv2dGrad {
            w: Array4::zeros(layer.w.raw_dim()),
            b: Array1::zeros(layer.b.raw_dim()),
        }
    }
}

/// Lowers one sample into a `(in_channels * k * k, out_h * out_w)` matrix.
///
/// For stride 1 each output row line maps to a contiguous input span, which
/// is filled with slice copies; larger strides fall back to stepped loops.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Float>(
    x: &ArrayView3<'_, F>,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
    col: &mut Array2<F>,
) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(col.shape(), [ci * k * k, oh * ow]);
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    let mut row = 0;
    for c in 0..ci {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let base = row * oh * ow;
                row += 1;
                let col_shift = (kw * dilation) as isize - pad as isize;
                for o_r in 0..oh {
                    let ih = (o_r * stride + kh * dilation) as isize - pad as isize;
                    let out = &mut cs[base + o_r * ow..base + (o_r + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        // iw = o_c + col_shift; valid o_c span is contiguous
                        let lo = (-col_shift).max(0) as usize;
                        let hi = ((w as isize - col_shift).max(0) as usize).min(ow);
                        out[..lo.min(ow)].fill(F::zero());
                        if lo < hi {
                            let start = (lo as isize + col_shift) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        out[hi.max(lo.min(ow))..].fill(F::zero());
                    } else {
                        for (o_c, slot) in out.iter_mut().enumerate() {
                            let iw = (o_c * stride) as isize + col_shift;
                            *slot = if iw < 0 || iw >= w as isize {
                                F::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column-space gradient back onto one input sample (general
/// fallback used for strided convolutions).
#[allow(clippy::too_many_arguments)]
fn col2im<F: Float>(
    dcol: &Array2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
    dx: &mut ArrayViewMut3<'_, F>,
) {
    let (ci, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let ds = dcol.as_slice().expect("contiguous dcol");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    let mut row = 0;
    for c in 0..ci {
        for kh in 0..k {
            for kw in 0..k {
                let base = row * oh * ow;
                row += 1;
                for o_r in 0..oh {
                    let ih = (o_r * stride + kh * dilation) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let plane = c * h * w + ih as usize * w;
                    for o_c in 0..ow {
                        let iw = (o_c * stride + kw * dilation) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            xs[plane + iw as usize] += ds[base + o_r * ow + o_c];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Conv2d<F> {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        let eff = self.dilation * (k - 1) + 1;
        (
            (h + 2 * self.pad - eff) / self.stride + 1,
            (w + 2 * self.pad - eff) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.w.shape()[2] == 1 && self.stride == 1 && self.pad == 0
    }

    fn w_mat(&self) -> ArrayView2<'_, F> {
        let (co, ci, k, _) = (
            self.w.shape()[0],
            self.w.shape()[1],
            self.w.shape()[2],
            self.w.shape()[3],
        );
        self.w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight reshape")
    }

    /// Weights flipped spatially with in/out channels swapped; used for the
    /// gemm-based input gradient of stride-1 convolutions.
    fn w_flipped(&self) -> Array4<F> {
        let (co, ci, k, _) = (
            self.w.shape()[0],
            self.w.shape()[1],
            self.w.shape()[2],
            self.w.shape()[3],
        );
        let mut flip = Array4::zeros((ci, co, k, k));
        for o in 0..co {
            for i in 0..ci {
                for kh in 0..k {
                    for kw in 0..k {
                        flip[[i, o, k - 1 - kh, k - 1 - kw]] = self.w[[o, i, kh, kw]];
                    }
                }
            }
        }
        flip
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (self.w.shape()[0], self.w.shape()[2]);
        debug_assert_eq!(ci, self.w.shape()[1]);
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self.w_mat();
        let mut y = Array4::zeros((n, co, oh, ow));
        let mut col = (!self.is_pointwise()).then(|| Array2::zeros((ci * k * k, oh * ow)));
        for i in 0..n {
            let mut dst = y.slice_mut(s![i, .., .., ..]);
            let mut dst2 = dst
                .view_mut()
                .into_shape_with_order((co, oh * ow))
                .expect("output reshape");
            if let Some(col) = col.as_mut() {
                im2col(
                    &x.slice(s![i, .., .., ..]),
                    k,
                    self.stride,
                    self.pad,
                    self.dilation,
                    oh,
                    ow,
                    col,
                );
                general_mat_mul(F::one(), &w_mat, &col.view(), F::zero(), &mut dst2);
            } else {
                let xm = x
                    .slice(s![i, .., .., ..])
                    .into_shape_with_order((ci, h * w))
                    .expect("reshape");
                general_mat_mul(F::one(), &w_mat, &xm, F::zero(), &mut dst2);
            }
            for cc in 0..co {
                let bias = self.b[cc];
                dst2.row_mut(cc).mapv_inplace(|v| v + bias);
            }
        }
        y
    }

    /// Backward pass. Recomputes `im2col` instead of caching it, trading a
    /// little compute for a much smaller memory footprint. Returns `dx` only
    /// when `need_dx` is set (first layers do not need it).
    pub fn backward(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        grad: &mut Conv2dGrad<F>,
        need_dx: bool,
    ) -> Option<Array4<F>> {
        let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (self.w.shape()[0], self.w.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self.w_mat();
        let mut dw_acc = Array2::<F>::zeros((co, ci * k * k));
        let mut col = (!self.is_pointwise()).then(|| Array2::zeros((ci * k * k, oh * ow)));
        for i in 0..n {
            let dy_mat = dy
                .slice(s![i, .., .., ..])
                .into_shape_with_order((co, oh * ow))
                .expect("dy reshape");
            if let Some(col) = col.as_mut() {
                im2col(
                    &x.slice(s![i, .., .., ..]),
                    k,
                    self.stride,
                    self.pad,
                    self.dilation,
                    oh,
                    ow,
                    col,
                );
                general_mat_mul(F::one(), &dy_mat, &col.t(), F::one(), &mut dw_acc);
            } else {
                let xm = x
                    .slice(s![i, .., .., ..])
                    .into_shape_with_order((ci, h * w))
                    .expect("reshape");
                general_mat_mul(F::one(), &dy_mat, &xm.t(), F::one(), &mut dw_acc);
            }
            for cc in 0..co {
                grad.b[cc] += dy_mat.row(cc).sum();
            }
        }
        let dw = dw_acc
            .into_shape_with_order((co, ci, k, k))
            .expect("dw reshape");
        grad.w += &dw;

        if !need_dx {
            return None;
        }
        if self.is_pointwise() {
            let mut dx = Array4::zeros((n, ci, h, w));
            for i in 0..n {
                let dy_mat = dy
                    .slice(s![i, .., .., ..])
                    .into_shape_with_order((co, oh * ow))
                    .expect("dy reshape");
                let mut dst = dx.slice_mut(s![i, .., .., ..]);
                let mut dst2 = dst
                    .view_mut()
                    .into_shape_with_order((ci, h * w))
                    .expect("reshape");
                general_mat_mul(F::one(), &w_mat.t(), &dy_mat, F::zero(), &mut dst2);
            }
            return Some(dx);
        }
        if self.stride == 1 && self.pad <= self.dilation * (k - 1) {
            // dX = conv(dY, flipped W) with complementary padding
            let tpad = self.dilation * (k - 1) - self.pad;
            let flip = Conv2d {
                w: self.w_flipped(),
                b: Array1::zeros(ci),
                stride: 1,
                pad: tpad,
                dilation: self.dilation,
            };
            debug_assert_eq!(flip.out_hw(oh, ow), (h, w));
            return Some(flip.forward(dy));
        }
        // strided fallback: scatter
        let mut dx = Array4::zeros((n, ci, h, w));
        for i in 0..n {
            let dy_mat = dy
                .slice(s![i, .., .., ..])
                .into_shape_with_order((co, oh * ow))
                .expect("dy reshape");
            let dcol = w_mat.t().dot(&dy_mat);
            col2im(
                &dcol,
                k,
                self.stride,
                self.pad,
                self.dilation,
                oh,
                ow,
                &mut dx.slice_mut(s![i, .., .., ..]),
            );
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_conv(stride: usize, dilation: usize, pad: usize) -> Conv2d<f64> {
        let mut w = Array4::zeros((2, 3, 3, 3));
        for (i, v) in w.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 0.3;
        }
        Conv2d {
            w,
            b: ndarray::arr1(&[0.1, -0.2]),
            stride,
            pad,
            dilation,
        }
    }

    /// Direct convolution, written independently of the im2col path.
    fn direct_forward(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (conv.w.shape()[0], conv.w.shape()[2]);
        let (oh, ow) = conv.out_hw(h, w);
        let mut y = Array4::zeros((n, co, oh, ow));
        for i in 0..n {
            for o in 0..co {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = conv.b[o];
                        for ic in 0..ci {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (r * conv.stride + kh * conv.dilation) as isize
                                        - conv.pad as isize;
                                    let iw = (c * conv.stride + kw * conv.dilation) as isize
                                        - conv.pad as isize;
                                    if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                        acc += x[[i, ic, ih as usize, iw as usize]]
                                            * conv.w[[o, ic, kh, kw]];
                                    }
                                }
                            }
                        }
                        y[[i, o, r, c]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        for (stride, dilation, pad) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 4, 4), (1, 1, 0)] {
            let conv = small_conv(stride, dilation, pad);
            let mut x = Array4::zeros((2, 3, 13, 11));
            for (i, v) in x.iter_mut().enumerate() {
                *v = ((i as f64) * 0.13).cos();
            }
            if conv.out_hw(13, 11).0 == 0 {
                continue;
            }
            let fast = conv.forward(&x);
            let slow = direct_forward(&conv, &x);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "stride {stride} dil {dilation} pad {pad}: {max}");
        }
    }

    #[test]
    fn pointwise_fast_path_matches_direct() {
        let mut w = Array4::zeros((3, 4, 1, 1));
        for (i, v) in w.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).cos();
        }
        let conv = Conv2d {
            w,
            b: ndarray::arr1(&[0.3, 0.0, -0.1]),
            stride: 1,
            pad: 0,
            dilation: 1,
        };
        let mut x = Array4::zeros((2, 4, 5, 5));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.11).sin();
        }
        let fast = conv.forward(&x);
        let slow = direct_forward(&conv, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (stride, dilation, pad) in [(1, 2, 2), (2, 1, 1), (1, 1, 1)] {
            let conv = small_conv(stride, dilation, pad);
            let mut x = Array4::zeros((1, 3, 7, 7));
            for (i, v) in x.iter_mut().enumerate() {
                *v = ((i as f64) * 0.29).sin();
            }
            // loss = sum(y^2)/2 so dy = y
            let y = conv.forward(&x);
            let mut grad = Conv2dGrad::zeros_like(&conv);
            let dx = conv.backward(&x, &y, &mut grad, true).unwrap();

            let h = 1e-6;
            let loss = |conv: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
                conv.forward(x).iter().map(|v| v * v).sum::<f64>() / 2.0
            };
            for idx in [[0usize, 0, 0, 0], [1, 2, 1, 2], [0, 1, 2, 1]] {
                let mut cp = conv.clone();
                cp.w[idx] += h;
                let up = loss(&cp, &x);
                cp.w[idx] -= 2.0 * h;
                let dn = loss(&cp, &x);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - grad.w[idx]).abs() < 1e-5, "dW mismatch at {idx:?}");
            }
            for idx in [[0usize, 0, 3, 3], [0, 2, 0, 6], [0, 1, 6, 0]] {
                let mut xp = x.clone();
                xp[idx] += h;
                let up = loss(&conv, &xp);
                xp[idx] -= 2.0 * h;
                let dn = loss(&conv, &xp);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - dx[idx]).abs() < 1e-5,
                    "dX mismatch at {idx:?} (stride {stride} dil {dilation})"
                );
            }
        }
    }
}
