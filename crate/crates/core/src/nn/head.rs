//! Context head shared by the attention network and the gaze predictor:
//! four serial dilated convolutions, context-channel concatenation, and a
//! three-layer pointwise stack reducing to a single-channel map.

use super::adam::Adam;
use super::context::{context_concat, context_concat_backward, extra_channels, ContextCache};
use super::conv::{Conv2d, Conv2dGrad};
use super::init::{self, LEAKY_SLOPE};
use super::layers::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, softmax_rows,
};
use super::{Float, ParamSet, FEAT_CHANNELS, GRID, N_CELLS};
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha20Rng;

pub const DILATION_RATES: [usize; 4] = [1, 2, 4, 8];

/// Output nonlinearity of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapActivation {
    /// Per-cell sigmoid; values in `[0, 1]`.
    Sigmoid,
    /// Softmax over all cells; the map sums to one.
    Softmax,
}

#[derive(Debug, Clone)]
pub struct ContextHead<F> {
    pub dilated: Vec<Conv2d<F>>,
    pub pw: Vec<Conv2d<F>>,
    pub with_lambda: bool,
    pub activation: MapActivation,
}

pub struct HeadCache<F> {
    feat: Array4<F>,
    pre: Vec<Array4<F>>,  // pre-activation outputs of the dilated convs
    post: Vec<Array4<F>>, // post-activation (inputs to the following conv)
    ctx: Array4<F>,
    ctx_cache: ContextCache,
    pw_pre: Vec<Array4<F>>,
    pw_post: Vec<Array4<F>>,
    out: Array4<F>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<F> {
    pub dilated: Vec<Conv2dGrad<F>>,
    pub pw: Vec<Conv2dGrad<F>>,
}

impl<F: Float> ContextHead<F> {
    pub fn new(
        rng: &mut ChaCha20Rng,
        pw_width: usize,
        with_lambda: bool,
        activation: MapActivation,
    ) -> Self {
        let dilated = DILATION_RATES
            .iter()
            .map(|&d| Conv2d {
                w: init::conv_weights(rng, FEAT_CHANNELS, FEAT_CHANNELS, 3),
                b: init::zero_bias(FEAT_CHANNELS),
                stride: 1,
                pad: d,
                dilation: d,
            })
            .collect();
        let ctx_ch = FEAT_CHANNELS + extra_channels(with_lambda);
        let pointwise = |rng: &mut ChaCha20Rng, ci: usize, co: usize| Conv2d {
            w: init::conv_weights(rng, co, ci, 1),
            b: init::zero_bias(co),
            stride: 1,
            pad: 0,
            dilation: 1,
        };
        let pw = vec![
            pointwise(rng, ctx_ch, pw_width),
            pointwise(rng, pw_width, pw_width),
            pointwise(rng, pw_width, 1),
        ];
        ContextHead {
            dilated,
            pw,
            with_lambda,
            activation,
        }
    }

    pub fn zero_grads(&self) -> HeadGrads<F> {
        HeadGrads {
            dilated: self.dilated.iter().map(Conv2dGrad::zeros_like).collect(),
            pw: self.pw.iter().map(Conv2dGrad::zeros_like).collect(),
        }
    }

    /// Maps features `(N, 32, G, G)` and an optional per-sample sparsity
    /// input to a `(N, 1, G, G)` map.
    pub fn forward(
        &self,
        feat: &Array4<F>,
        lambda: Option<&Array1<F>>,
    ) -> (Array4<F>, HeadCache<F>) {
        debug_assert_eq!(lambda.is_some(), self.with_lambda);
        let n = feat.shape()[0];
        let mut pre = Vec::with_capacity(4);
        let mut post = Vec::with_capacity(4);
        let mut cur = feat.clone();
        for conv in &self.dilated {
            let a = conv.forward(&cur);
            cur = leaky_relu(&a, LEAKY_SLOPE);
            pre.push(a);
            post.push(cur.clone());
        }
        let (ctx, ctx_cache) = context_concat(&cur, lambda);
        let mut pw_pre = Vec::with_capacity(3);
        let mut pw_post = Vec::with_capacity(3);
        let mut h = ctx.clone();
        for (i, conv) in self.pw.iter().enumerate() {
            let a = conv.forward(&h);
            if i + 1 < self.pw.len() {
                h = leaky_relu(&a, LEAKY_SLOPE);
                pw_post.push(h.clone());
            } else {
                h = a.clone();
            }
            pw_pre.push(a);
        }
        let logits = h;
        let out = match self.activation {
            MapActivation::Sigmoid => sigmoid(&logits),
            MapActivation::Softmax => {
                let flat = logits
                    .view()
                    .into_shape_with_order((n, N_CELLS))
                    .expect("flatten");
                softmax_rows(&flat.to_owned())
                    .into_shape_with_order((n, 1, GRID, GRID))
                    .expect("unflatten")
            }
        };
        (
            out.clone(),
            HeadCache {
                feat: feat.clone(),
                pre,
                post,
                ctx,
                ctx_cache,
                pw_pre,
                pw_post,
                out,
            },
        )
    }

    /// Backward from a gradient w.r.t. the output map. Returns gradients
    /// w.r.t. the input features and the sparsity input.
    pub fn backward(
        &self,
        cache: &HeadCache<F>,
        dmap: &Array4<F>,
        grads: &mut HeadGrads<F>,
        need_dfeat: bool,
    ) -> (Option<Array4<F>>, Option<Array1<F>>) {
        let n = dmap.shape()[0];
        let mut dlogits = match self.activation {
            MapActivation::Sigmoid => sigmoid_backward(&cache.out, dmap),
            MapActivation::Softmax => {
                // dz_k = q_k * (dy_k - sum_i q_i dy_i)
                let q = cache
                    .out
                    .view()
                    .into_shape_with_order((n, N_CELLS))
                    .expect("flatten");
                let dy = dmap
                    .view()
                    .into_shape_with_order((n, N_CELLS))
                    .expect("flatten");
                let mut dz = Array2::<F>::zeros((n, N_CELLS));
                for i in 0..n {
                    let dot = q.row(i).dot(&dy.row(i));
                    for k in 0..N_CELLS {
                        dz[[i, k]] = q[[i, k]] * (dy[[i, k]] - dot);
                    }
                }
                dz.into_shape_with_order((n, 1, GRID, GRID)).expect("unflatten")
            }
        };
        // pointwise stack, last layer has no activation
        for i in (0..self.pw.len()).rev() {
            let input = if i == 0 { &cache.ctx } else { &cache.pw_post[i - 1] };
            let mut d_in = self.pw[i]
                .backward(input, &dlogits, &mut grads.pw[i], true)
                .expect("dx requested");
            if i > 0 {
                leaky_relu_backward_inplace(&cache.pw_pre[i - 1], &mut d_in, LEAKY_SLOPE);
            }
            dlogits = d_in;
        }
        let (mut dcur, dlambda) = context_concat_backward(
            &dlogits,
            FEAT_CHANNELS,
            &cache.ctx_cache,
            self.with_lambda,
        );
        for i in (0..self.dilated.len()).rev() {
            leaky_relu_backward_inplace(&cache.pre[i], &mut dcur, LEAKY_SLOPE);
            let input = if i == 0 { &cache.feat } else { &cache.post[i - 1] };
            let want_dx = need_dfeat || i > 0;
            match self.dilated[i].backward(input, &dcur, &mut grads.dilated[i], want_dx) {
                Some(d) => dcur = d,
                None => return (None, dlambda),
            }
        }
        (Some(dcur), dlambda)
    }

    pub fn apply_grads(&mut self, grads: &HeadGrads<F>, opt: &mut Adam<F>) {
        for (conv, g) in self.dilated.iter_mut().zip(&grads.dilated) {
            opt.update(conv.w.view_mut().into_dyn(), g.w.view().into_dyn());
            opt.update(conv.b.view_mut().into_dyn(), g.b.view().into_dyn());
        }
        for (conv, g) in self.pw.iter_mut().zip(&grads.pw) {
            opt.update(conv.w.view_mut().into_dyn(), g.w.view().into_dyn());
            opt.update(conv.b.view_mut().into_dyn(), g.b.view().into_dyn());
        }
    }
}

impl<F: Float> ParamSet<F> for ContextHead<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        for (i, conv) in self.dilated.iter().enumerate() {
            f(&format!("head.dilated{i}.w"), conv.w.view().into_dyn());
            f(&format!("head.dilated{i}.b"), conv.b.view().into_dyn());
        }
        for (i, conv) in self.pw.iter().enumerate() {
            f(&format!("head.pw{i}.w"), conv.w.view().into_dyn());
            f(&format!("head.pw{i}.b"), conv.b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        for (i, conv) in self.dilated.iter_mut().enumerate() {
            f(&format!("head.dilated{i}.w"), conv.w.view_mut().into_dyn());
            f(&format!("head.dilated{i}.b"), conv.b.view_mut().into_dyn());
        }
        for (i, conv) in self.pw.iter_mut().enumerate() {
            f(&format!("head.pw{i}.w"), conv.w.view_mut().into_dyn());
            f(&format!("head.pw{i}.b"), conv.b.view_mut().into_dyn());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sigmoid_head_bounds_and_zero_logit_midpoint() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut head = ContextHead::<f64>::new(&mut rng, 8, true, MapActivation::Sigmoid);
        let feat = Array4::from_shape_fn((2, FEAT_CHANNELS, GRID, GRID), |(_, c, r, col)| {
            ((c + r * col) as f64 * 0.01).sin()
        });
        let lam = ndarray::arr1(&[0.3, 0.9]);
        let (map, _) = head.forward(&feat, Some(&lam));
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // zero final layer -> logits 0 -> sigmoid 0.5 everywhere
        head.pw[2].w.fill(0.0);
        head.pw[2].b.fill(0.0);
        let (map, _) = head.forward(&feat, Some(&lam));
        assert!(map.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_head_sums_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let head = ContextHead::<f64>::new(&mut rng, 8, false, MapActivation::Softmax);
        let feat = Array4::from_shape_fn((3, FEAT_CHANNELS, GRID, GRID), |(n, c, r, col)| {
            ((n + c + r + col) as f64 * 0.07).cos()
        });
        let (map, _) = head.forward(&feat, None);
        for i in 0..3 {
            let s: f64 = map.slice(ndarray::s![i, .., .., ..]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_input_reaches_the_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let head = ContextHead::<f64>::new(&mut rng, 8, true, MapActivation::Sigmoid);
        let feat = Array4::from_shape_fn((1, FEAT_CHANNELS, GRID, GRID), |(_, c, r, col)| {
            ((c * r + col) as f64 * 0.03).sin()
        });
        let lam = ndarray::arr1(&[0.5]);
        let (map, cache) = head.forward(&feat, Some(&lam));
        // d(sum of map)/d(lambda) != 0 for random parameters
        let dmap = Array4::ones(map.raw_dim());
        let mut grads = head.zero_grads();
        let (_, dlam) = head.backward(&cache, &dmap, &mut grads, false);
        let dlam = dlam.unwrap();
        assert!(dlam[0].abs() > 1e-9, "lambda gradient is zero: {}", dlam[0]);

        // and the analytic gradient matches a central difference
        let h = 1e-6;
        let (up, _) = head.forward(&feat, Some(&ndarray::arr1(&[0.5 + h])));
        let (dn, _) = head.forward(&feat, Some(&ndarray::arr1(&[0.5 - h])));
        let fd = (up.sum() - dn.sum()) / (2.0 * h);
        assert!(
            (fd - dlam[0]).abs() <= 1e-6 * dlam[0].abs().max(1.0),
            "fd {fd} vs analytic {}",
            dlam[0]
        );
    }
}
