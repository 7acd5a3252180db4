//! Action predictor: a small conv + MLP stack over the feature space.

use super::adam::Adam;
use super::conv::{Conv2d, Conv2dGrad};
use super::init::{self, LEAKY_SLOPE};
use super::layers::{
    leaky_relu, leaky_relu_backward, log_softmax_rows, softmax_rows, Linear, LinearGrad,
};
use super::{Float, ParamSet, FEAT_CHANNELS, GRID};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha20Rng;

/// Layer widths. The defaults follow the reference layout; the toy pipeline
/// shrinks them since the tasks are far simpler than full game frames.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ActionPredictorWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for ActionPredictorWidths {
    fn default() -> Self {
        ActionPredictorWidths {
            conv1: 64,
            conv2: 64,
            hidden: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActionPredictor<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub n_actions: usize,
}

pub struct ActionPredictorCache<F> {
    x: Array4<F>,
    a1: Array4<F>,
    r1: Array4<F>,
    a2: Array4<F>,
    flat: Array2<F>,
    h_pre: Array2<F>,
    h: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ActionPredictorGrads<F> {
    pub conv1: Conv2dGrad<F>,
    pub conv2: Conv2dGrad<F>,
    pub fc1: LinearGrad<F>,
    pub fc2: LinearGrad<F>,
}

impl<F: Float> ActionPredictor<F> {
    pub fn new(rng: &mut ChaCha20Rng, widths: ActionPredictorWidths, n_actions: usize) -> Self {
        let conv = |rng: &mut ChaCha20Rng, ci: usize, co: usize| Conv2d {
            w: init::conv_weights(rng, co, ci, 3),
            b: init::zero_bias(co),
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        ActionPredictor {
            conv1: conv(rng, FEAT_CHANNELS, widths.conv1),
            conv2: conv(rng, widths.conv1, widths.conv2),
            fc1: Linear {
                w: init::linear_weights(rng, widths.hidden, widths.conv2 * GRID * GRID),
                b: init::zero_bias(widths.hidden),
            },
            fc2: Linear {
                w: init::linear_weights(rng, n_actions, widths.hidden),
                b: init::zero_bias(n_actions),
            },
            n_actions,
        }
    }

    pub fn zero_grads(&self) -> ActionPredictorGrads<F> {
        ActionPredictorGrads {
            conv1: Conv2dGrad::zeros_like(&self.conv1),
            conv2: Conv2dGrad::zeros_like(&self.conv2),
            fc1: LinearGrad::zeros_like(&self.fc1),
            fc2: LinearGrad::zeros_like(&self.fc2),
        }
    }

    /// Features `(N, 32, G, G)` to logits `(N, n_actions)`.
    pub fn forward(&self, feat: &Array4<F>) -> (Array2<F>, ActionPredictorCache<F>) {
        let n = feat.shape()[0];
        let a1 = self.conv1.forward(feat);
        let r1 = leaky_relu(&a1, LEAKY_SLOPE);
        let a2 = self.conv2.forward(&r1);
        let r2 = leaky_relu(&a2, LEAKY_SLOPE);
        let flat = r2
            .into_shape_with_order((n, self.conv2.w.shape()[0] * GRID * GRID))
            .expect("flatten");
        let h_pre = self.fc1.forward(&flat);
        let h = leaky_relu(&h_pre, LEAKY_SLOPE);
        let logits = self.fc2.forward(&h);
        (
            logits,
            ActionPredictorCache {
                x: feat.clone(),
                a1,
                r1,
                a2,
                flat,
                h_pre,
                h,
            },
        )
    }

    /// Softmax probabilities; each row sums to one.
    pub fn probs(&self, feat: &Array4<F>) -> Array2<F> {
        softmax_rows(&self.forward(feat).0)
    }

    pub fn log_probs(logits: &Array2<F>) -> Array2<F> {
        log_softmax_rows(logits)
    }

    pub fn backward(
        &self,
        cache: &ActionPredictorCache<F>,
        dlogits: &Array2<F>,
        grads: &mut ActionPredictorGrads<F>,
        need_dfeat: bool,
    ) -> Option<Array4<F>> {
        let n = cache.x.shape()[0];
        let dh = self
            .fc2
            .backward(&cache.h, dlogits, &mut grads.fc2, true)
            .expect("dx requested");
        let dh_pre = leaky_relu_backward(&cache.h_pre, &dh, LEAKY_SLOPE);
        let dflat = self
            .fc1
            .backward(&cache.flat, &dh_pre, &mut grads.fc1, true)
            .expect("dx requested");
        let c2 = self.conv2.w.shape()[0];
        let dr2 = dflat
            .into_shape_with_order((n, c2, GRID, GRID))
            .expect("unflatten");
        let da2 = leaky_relu_backward(&cache.a2, &dr2, LEAKY_SLOPE);
        let dr1 = self
            .conv2
            .backward(&cache.r1, &da2, &mut grads.conv2, true)
            .expect("dx requested");
        let da1 = leaky_relu_backward(&cache.a1, &dr1, LEAKY_SLOPE);
        self.conv1.backward(&cache.x, &da1, &mut grads.conv1, need_dfeat)
    }

    pub fn apply_grads(&mut self, grads: &ActionPredictorGrads<F>, opt: &mut Adam<F>) {
        opt.update(self.conv1.w.view_mut().into_dyn(), grads.conv1.w.view().into_dyn());
        opt.update(self.conv1.b.view_mut().into_dyn(), grads.conv1.b.view().into_dyn());
        opt.update(self.conv2.w.view_mut().into_dyn(), grads.conv2.w.view().into_dyn());
        opt.update(self.conv2.b.view_mut().into_dyn(), grads.conv2.b.view().into_dyn());
        opt.update(self.fc1.w.view_mut().into_dyn(), grads.fc1.w.view().into_dyn());
        opt.update(self.fc1.b.view_mut().into_dyn(), grads.fc1.b.view().into_dyn());
        opt.update(self.fc2.w.view_mut().into_dyn(), grads.fc2.w.view().into_dyn());
        opt.update(self.fc2.b.view_mut().into_dyn(), grads.fc2.b.view().into_dyn());
    }
}

impl<F: Float> ParamSet<F> for ActionPredictor<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        f("ap.conv1.w", self.conv1.w.view().into_dyn());
        f("ap.conv1.b", self.conv1.b.view().into_dyn());
        f("ap.conv2.w", self.conv2.w.view().into_dyn());
        f("ap.conv2.b", self.conv2.b.view().into_dyn());
        f("ap.fc1.w", self.fc1.w.view().into_dyn());
        f("ap.fc1.b", self.fc1.b.view().into_dyn());
        f("ap.fc2.w", self.fc2.w.view().into_dyn());
        f("ap.fc2.b", self.fc2.b.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        f("ap.conv1.w", self.conv1.w.view_mut().into_dyn());
        f("ap.conv1.b", self.conv1.b.view_mut().into_dyn());
        f("ap.conv2.w", self.conv2.w.view_mut().into_dyn());
        f("ap.conv2.b", self.conv2.b.view_mut().into_dyn());
        f("ap.fc1.w", self.fc1.w.view_mut().into_dyn());
        f("ap.fc1.b", self.fc1.b.view_mut().into_dyn());
        f("ap.fc2.w", self.fc2.w.view_mut().into_dyn());
        f("ap.fc2.b", self.fc2.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ActionPredictor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        ActionPredictor::new(
            &mut rng,
            ActionPredictorWidths {
                conv1: 4,
                conv2: 4,
                hidden: 16,
            },
            3,
        )
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let ap = tiny();
        let feat = Array4::from_shape_fn((2, FEAT_CHANNELS, GRID, GRID), |(n, c, r, col)| {
            ((n * 7 + c * 3 + r + col) as f64 * 0.05).sin()
        });
        let p = ap.probs(&feat);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_logits_give_uniform_probabilities() {
        let mut ap = tiny();
        ap.fc2.w.fill(0.0);
        ap.fc2.b.fill(0.0);
        let feat = Array4::ones((1, FEAT_CHANNELS, GRID, GRID));
        let p = ap.probs(&feat);
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
