//! Context augmentation: append global pooling, coordinate and sparsity
//! channels to a feature tensor.

use super::{c, Float, GRID};
use ndarray::{s, Array1, Array4};

/// Number of channels appended (global max, global mean, x, y) plus an
/// optional sparsity plane.
pub fn extra_channels(with_lambda: bool) -> usize {
    if with_lambda {
        5
    } else {
        4
    }
}

pub struct ContextCache {
    /// Flat index of the global maximum per sample (first occurrence).
    pub argmax: Vec<usize>,
}

/// Appends context channels to `feat` `(N, C, G, G)`:
/// channel `C` is the global maximum of the sample broadcast over space,
/// `C+1` the global mean, `C+2`/`C+3` are x/y coordinates normalized to
/// `[-1, 1]`, and `C+4` (when `lambda` is given) a constant sparsity plane.
pub fn context_concat<F: Float>(
    feat: &Array4<F>,
    lambda: Option<&Array1<F>>,
) -> (Array4<F>, ContextCache) {
    let (n, ch, g, _) = (
        feat.shape()[0],
        feat.shape()[1],
        feat.shape()[2],
        feat.shape()[3],
    );
    debug_assert_eq!(g, GRID);
    let out_ch = ch + extra_channels(lambda.is_some());
    let mut out = Array4::zeros((n, out_ch, g, g));
    let mut argmax = Vec::with_capacity(n);
    let denom = c::<F>((ch * g * g) as f64);
    for i in 0..n {
        let sample = feat.slice(s![i, .., .., ..]);
        out.slice_mut(s![i, ..ch, .., ..]).assign(&sample);
        let flat = sample.as_slice().expect("contiguous");
        let (mut best, mut best_ix) = (flat[0], 0usize);
        let mut sum = F::zero();
        for (ix, &v) in flat.iter().enumerate() {
            sum += v;
            if v > best {
                best = v;
                best_ix = ix;
            }
        }
        argmax.push(best_ix);
        out.slice_mut(s![i, ch, .., ..]).fill(best);
        out.slice_mut(s![i, ch + 1, .., ..]).fill(sum / denom);
        for r in 0..g {
            for col in 0..g {
                out[[i, ch + 2, r, col]] = c::<F>(-1.0 + 2.0 * col as f64 / (g - 1) as f64);
                out[[i, ch + 3, r, col]] = c::<F>(-1.0 + 2.0 * r as f64 / (g - 1) as f64);
            }
        }
        if let Some(l) = lambda {
            out.slice_mut(s![i, ch + 4, .., ..]).fill(l[i]);
        }
    }
    (out, ContextCache { argmax })
}

/// Backward through [`context_concat`]. Returns the gradient w.r.t. the
/// feature tensor and, when the sparsity plane is present, w.r.t. lambda.
pub fn context_concat_backward<F: Float>(
    dy: &Array4<F>,
    feat_channels: usize,
    cache: &ContextCache,
    with_lambda: bool,
) -> (Array4<F>, Option<Array1<F>>) {
    let (n, _, g, _) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let ch = feat_channels;
    let mut dfeat = dy.slice(s![.., ..ch, .., ..]).to_owned();
    let denom = c::<F>((ch * g * g) as f64);
    let mut dlambda = with_lambda.then(|| Array1::zeros(n));
    for i in 0..n {
        let dmax = dy.slice(s![i, ch, .., ..]).sum();
        let dmean = dy.slice(s![i, ch + 1, .., ..]).sum() / denom;
        {
            let mut df = dfeat.slice_mut(s![i, .., .., ..]);
            let flat = df.as_slice_mut().expect("contiguous");
            flat[cache.argmax[i]] += dmax;
            for v in flat.iter_mut() {
                *v += dmean;
            }
        }
        if let Some(dl) = dlambda.as_mut() {
            dl[i] = dy.slice(s![i, ch + 4, .., ..]).sum();
        }
    }
    (dfeat, dlambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_channels_layout() {
        let mut feat = Array4::<f64>::zeros((1, 2, 21, 21));
        feat[[0, 1, 3, 4]] = 5.0;
        let lam = ndarray::arr1(&[0.25]);
        let (out, cache) = context_concat(&feat, Some(&lam));
        assert_eq!(out.shape(), &[1, 7, 21, 21]);
        assert_eq!(out[[0, 2, 10, 10]], 5.0); // global max broadcast
        assert!((out[[0, 3, 0, 0]] - 5.0 / (2.0 * 441.0)).abs() < 1e-12);
        assert_eq!(out[[0, 4, 0, 0]], -1.0); // x at left edge
        assert_eq!(out[[0, 4, 0, 20]], 1.0);
        assert_eq!(out[[0, 5, 20, 0]], 1.0); // y at bottom edge
        assert_eq!(out[[0, 6, 7, 7]], 0.25);
        assert_eq!(cache.argmax[0], 1 * 441 + 3 * 21 + 4);
    }

    #[test]
    fn backward_routes_max_and_mean() {
        let mut feat = Array4::<f64>::zeros((1, 2, 21, 21));
        feat[[0, 0, 0, 0]] = 1.0;
        let lam = ndarray::arr1(&[0.5]);
        let (_, cache) = context_concat(&feat, Some(&lam));
        let mut dy = Array4::<f64>::zeros((1, 7, 21, 21));
        dy[[0, 2, 5, 5]] = 2.0; // grad into max channel
        dy[[0, 6, 1, 1]] = 3.0; // grad into lambda plane
        let (dfeat, dlam) = context_concat_backward(&dy, 2, &cache, true);
        assert!((dfeat[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(dlam.unwrap()[0], 3.0);
    }
}
