//! Parameter-free layers and the affine layer.

use super::{c, Float};
use ndarray::{Array1, Array2, Array4, Axis};

/// Leaky ReLU with the slope applied to negative inputs.
pub fn leaky_relu<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let a = c::<F>(slope);
    x.mapv(|v| if v > F::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    leaky_relu_backward_inplace(x, &mut dx, slope);
    dx
}

/// In-place variant for owned upstream gradients.
pub fn leaky_relu_backward_inplace<F: Float, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &mut ndarray::Array<F, D>,
    slope: f64,
) {
    let a = c::<F>(slope);
    ndarray::Zip::from(dy).and(x).for_each(|d, &xv| {
        if xv <= F::zero() {
            *d = *d * a;
        }
    });
}

pub fn sigmoid<F: Float, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward<F: Float, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * yv * (F::one() - yv);
    });
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Float>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Float>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let s = row.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b);
        let log_z = m + s.ln();
        row.mapv_inplace(|v| v - log_z);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// Shape `(out, in)`.
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Float> LinearGrad<F> {
    pub fn zeros_like(layer: &Linear<F>) -> Self {
        LinearGrad {
            w: Array2::zeros(layer.w.raw_dim()),
            b: Array1::zeros(layer.b.raw_dim()),
        }
    }
}

impl<F: Float> Linear<F> {
    /// `x` has shape `(batch, in)`; returns `(batch, out)`.
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    pub fn backward(
        &self,
        x: &Array2<F>,
        dy: &Array2<F>,
        grad: &mut LinearGrad<F>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.w))
    }
}

/// Anti-aliased downsampling: fixed normalized 3x3 binomial kernel applied
/// depthwise with stride 2 and padding 1. Halves both spatial dimensions.
pub fn blur_pool<F: Float>(x: &Array4<F>) -> Array4<F> {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let kern = blur_kernel::<F>();
    let mut y = Array4::zeros((n, ch, oh, ow));
    let xs = x.as_slice().expect("contiguous");
    let ys = y.as_slice_mut().expect("contiguous");
    for nc in 0..n * ch {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut ys[nc * oh * ow..(nc + 1) * oh * ow];
        for r in 0..oh {
            let interior_r = 2 * r >= 1 && 2 * r + 1 < h;
            let dst_row = &mut dst[r * ow..(r + 1) * ow];
            if interior_r {
                let r0 = &src[(2 * r - 1) * w..(2 * r - 1) * w + w];
                let r1 = &src[2 * r * w..2 * r * w + w];
                let r2 = &src[(2 * r + 1) * w..(2 * r + 1) * w + w];
                // columns 1..ow-1 touch only valid input columns
                for cc in 1..ow.saturating_sub(1).max(1).min(ow) {
                    let c0 = 2 * cc - 1;
                    dst_row[cc] = kern[0][0] * r0[c0]
                        + kern[0][1] * r0[c0 + 1]
                        + kern[0][2] * r0[c0 + 2]
                        + kern[1][0] * r1[c0]
                        + kern[1][1] * r1[c0 + 1]
                        + kern[1][2] * r1[c0 + 2]
                        + kern[2][0] * r2[c0]
                        + kern[2][1] * r2[c0 + 1]
                        + kern[2][2] * r2[c0 + 2];
                }
            }
            // border columns (and border rows) take the checked path
            let cols: Vec<usize> = if interior_r {
                let mut v = vec![0];
                if ow > 1 {
                    v.push(ow - 1);
                }
                v
            } else {
                (0..ow).collect()
            };
            for cc in cols {
                let mut acc = F::zero();
                for kh in 0..3 {
                    let ih = (2 * r + kh) as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = (2 * cc + kw) as isize - 1;
                        if iw >= 0 && iw < w as isize {
                            acc += kern[kh][kw] * src[ih as usize * w + iw as usize];
                        }
                    }
                }
                dst_row[cc] = acc;
            }
        }
    }
    y
}

pub fn blur_pool_backward<F: Float>(dy: &Array4<F>, in_h: usize, in_w: usize) -> Array4<F> {
    let (n, ch, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let kern = blur_kernel::<F>();
    let mut dx = Array4::zeros((n, ch, in_h, in_w));
    let ds = dy.as_slice().expect("contiguous");
    let xs = dx.as_slice_mut().expect("contiguous");
    for nc in 0..n * ch {
        let src = &ds[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut xs[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for r in 0..oh {
            let interior_r = r >= 1 && 2 * r + 1 < in_h;
            let mut scatter_checked = |cc: usize| {
                let g = src[r * ow + cc];
                for kh in 0..3 {
                    let ih = (2 * r + kh) as isize - 1;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = (2 * cc + kw) as isize - 1;
                        if iw >= 0 && iw < in_w as isize {
                            dst[ih as usize * in_w + iw as usize] += g * kern[kh][kw];
                        }
                    }
                }
            };
            if !interior_r {
                for cc in 0..ow {
                    scatter_checked(cc);
                }
                continue;
            }
            let hi = if 2 * (ow - 1) + 1 < in_w { ow } else { ow - 1 };
            for cc in 1..hi {
                let g = src[r * ow + cc];
                let c0 = 2 * cc - 1;
                let base = (2 * r - 1) * in_w + c0;
                dst[base] += g * kern[0][0];
                dst[base + 1] += g * kern[0][1];
                dst[base + 2] += g * kern[0][2];
                dst[base + in_w] += g * kern[1][0];
                dst[base + in_w + 1] += g * kern[1][1];
                dst[base + in_w + 2] += g * kern[1][2];
                dst[base + 2 * in_w] += g * kern[2][0];
                dst[base + 2 * in_w + 1] += g * kern[2][1];
                dst[base + 2 * in_w + 2] += g * kern[2][2];
            }
            scatter_checked(0);
            if hi < ow {
                scatter_checked(ow - 1);
            }
        }
    }
    dx
}

/// The normalized binomial kernel used by [`blur_pool`].
pub fn blur_kernel<F: Float>() -> [[F; 3]; 3] {
    let s = c::<F>(1.0 / 16.0);
    let w = [1.0, 2.0, 1.0];
    let mut k = [[F::zero(); 3]; 3];
    for (i, &wi) in w.iter().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            k[i][j] = c::<F>(wi * wj) * s;
        }
    }
    k
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<F: Float>(x: &Array4<F>) -> Array4<F> {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::zeros((n, ch, 2 * h, 2 * w));
    for i in 0..n {
        for cc in 0..ch {
            for r in 0..h {
                for col in 0..w {
                    let v = x[[i, cc, r, col]];
                    y[[i, cc, 2 * r, 2 * col]] = v;
                    y[[i, cc, 2 * r + 1, 2 * col]] = v;
                    y[[i, cc, 2 * r, 2 * col + 1]] = v;
                    y[[i, cc, 2 * r + 1, 2 * col + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<F: Float>(dy: &Array4<F>) -> Array4<F> {
    let (n, ch, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, ch, h, w));
    for i in 0..n {
        for cc in 0..ch {
            for r in 0..h {
                for col in 0..w {
                    dx[[i, cc, r, col]] = dy[[i, cc, 2 * r, 2 * col]]
                        + dy[[i, cc, 2 * r + 1, 2 * col]]
                        + dy[[i, cc, 2 * r, 2 * col + 1]]
                        + dy[[i, cc, 2 * r + 1, 2 * col + 1]];
                }
            }
        }
    }
    dx
}
