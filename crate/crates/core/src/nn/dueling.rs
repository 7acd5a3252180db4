//! Dueling Q-network over the encoded feature space.

use super::adam::Adam;
use super::conv::{Conv2d, Conv2dGrad};
use super::init::{self, LEAKY_SLOPE};
use super::layers::{leaky_relu, leaky_relu_backward, Linear, LinearGrad};
use super::{c, Float, ParamSet, FEAT_CHANNELS, GRID};
use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct QNetWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for QNetWidths {
    fn default() -> Self {
        QNetWidths {
            conv1: 64,
            conv2: 64,
            hidden: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QNet<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub fc: Linear<F>,
    pub value: Linear<F>,
    pub advantage: Linear<F>,
    pub n_actions: usize,
}

pub struct QNetCache<F> {
    x: Array4<F>,
    a1: Array4<F>,
    r1: Array4<F>,
    a2: Array4<F>,
    flat: Array2<F>,
    h_pre: Array2<F>,
    h: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct QNetGrads<F> {
    pub conv1: Conv2dGrad<F>,
    pub conv2: Conv2dGrad<F>,
    pub fc: LinearGrad<F>,
    pub value: LinearGrad<F>,
    pub advantage: LinearGrad<F>,
}

/// Combines value and advantage streams: `Q = V + A - mean(A)`.
pub fn dueling_combine<F: Float>(v: &Array2<F>, a: &Array2<F>) -> Array2<F> {
    let n_a = a.shape()[1];
    let mut q = a.clone();
    let mean = a.sum_axis(Axis(1)) / c::<F>(n_a as f64);
    for (mut row, (&vi, &mi)) in q.rows_mut().into_iter().zip(v.column(0).iter().zip(&mean)) {
        row.mapv_inplace(|av| av + vi - mi);
    }
    q
}

impl<F: Float> QNet<F> {
    pub fn new(rng: &mut ChaCha20Rng, widths: QNetWidths, n_actions: usize) -> Self {
        let conv = |rng: &mut ChaCha20Rng, ci: usize, co: usize| Conv2d {
            w: init::conv_weights(rng, co, ci, 3),
            b: init::zero_bias(co),
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        QNet {
            conv1: conv(rng, FEAT_CHANNELS, widths.conv1),
            conv2: conv(rng, widths.conv1, widths.conv2),
            fc: Linear {
                w: init::linear_weights(rng, widths.hidden, widths.conv2 * GRID * GRID),
                b: init::zero_bias(widths.hidden),
            },
            value: Linear {
                w: init::linear_weights(rng, 1, widths.hidden),
                b: init::zero_bias(1),
            },
            advantage: Linear {
                w: init::linear_weights(rng, n_actions, widths.hidden),
                b: init::zero_bias(n_actions),
            },
            n_actions,
        }
    }

    pub fn zero_grads(&self) -> QNetGrads<F> {
        QNetGrads {
            conv1: Conv2dGrad::zeros_like(&self.conv1),
            conv2: Conv2dGrad::zeros_like(&self.conv2),
            fc: LinearGrad::zeros_like(&self.fc),
            value: LinearGrad::zeros_like(&self.value),
            advantage: LinearGrad::zeros_like(&self.advantage),
        }
    }

    pub fn forward(&self, feat: &Array4<F>) -> (Array2<F>, QNetCache<F>) {
        let n = feat.shape()[0];
        let a1 = self.conv1.forward(feat);
        let r1 = leaky_relu(&a1, LEAKY_SLOPE);
        let a2 = self.conv2.forward(&r1);
        let r2 = leaky_relu(&a2, LEAKY_SLOPE);
        let flat = r2
            .into_shape_with_order((n, self.conv2.w.shape()[0] * GRID * GRID))
            .expect("flatten");
        let h_pre = self.fc.forward(&flat);
        let h = leaky_relu(&h_pre, LEAKY_SLOPE);
        let v = self.value.forward(&h);
        let a = self.advantage.forward(&h);
        let q = dueling_combine(&v, &a);
        (
            q,
            QNetCache {
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

    /// Q-values without keeping a cache; used for action selection.
    pub fn q_values(&self, feat: &Array4<F>) -> Array2<F> {
        self.forward(feat).0
    }

    pub fn backward(&self, cache: &QNetCache<F>, dq: &Array2<F>, grads: &mut QNetGrads<F>) {
        let n_a = c::<F>(self.n_actions as f64);
        // dV = sum_k dQ_k ; dA_i = dQ_i - mean_k dQ_k
        let dv = dq
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let mut da = dq.clone();
        for (mut row, &s) in da.rows_mut().into_iter().zip(dv.column(0).iter()) {
            let m = s / n_a;
            row.mapv_inplace(|v| v - m);
        }
        let mut dh = self
            .value
            .backward(&cache.h, &dv, &mut grads.value, true)
            .expect("dx requested");
        dh += &self
            .advantage
            .backward(&cache.h, &da, &mut grads.advantage, true)
            .expect("dx requested");
        let dh_pre = leaky_relu_backward(&cache.h_pre, &dh, LEAKY_SLOPE);
        let dflat = self
            .fc
            .backward(&cache.flat, &dh_pre, &mut grads.fc, true)
            .expect("dx requested");
        let n = cache.x.shape()[0];
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
        self.conv1.backward(&cache.x, &da1, &mut grads.conv1, false);
    }

    pub fn apply_grads(&mut self, grads: &QNetGrads<F>, opt: &mut Adam<F>) {
        opt.update(self.conv1.w.view_mut().into_dyn(), grads.conv1.w.view().into_dyn());
        opt.update(self.conv1.b.view_mut().into_dyn(), grads.conv1.b.view().into_dyn());
        opt.update(self.conv2.w.view_mut().into_dyn(), grads.conv2.w.view().into_dyn());
        opt.update(self.conv2.b.view_mut().into_dyn(), grads.conv2.b.view().into_dyn());
        opt.update(self.fc.w.view_mut().into_dyn(), grads.fc.w.view().into_dyn());
        opt.update(self.fc.b.view_mut().into_dyn(), grads.fc.b.view().into_dyn());
        opt.update(self.value.w.view_mut().into_dyn(), grads.value.w.view().into_dyn());
        opt.update(self.value.b.view_mut().into_dyn(), grads.value.b.view().into_dyn());
        opt.update(self.advantage.w.view_mut().into_dyn(), grads.advantage.w.view().into_dyn());
        opt.update(self.advantage.b.view_mut().into_dyn(), grads.advantage.b.view().into_dyn());
    }
}

impl<F: Float> ParamSet<F> for QNet<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        f("q.conv1.w", self.conv1.w.view().into_dyn());
        f("q.conv1.b", self.conv1.b.view().into_dyn());
        f("q.conv2.w", self.conv2.w.view().into_dyn());
        f("q.conv2.b", self.conv2.b.view().into_dyn());
        f("q.fc.w", self.fc.w.view().into_dyn());
        f("q.fc.b", self.fc.b.view().into_dyn());
        f("q.value.w", self.value.w.view().into_dyn());
        f("q.value.b", self.value.b.view().into_dyn());
        f("q.advantage.w", self.advantage.w.view().into_dyn());
        f("q.advantage.b", self.advantage.b.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        f("q.conv1.w", self.conv1.w.view_mut().into_dyn());
        f("q.conv1.b", self.conv1.b.view_mut().into_dyn());
        f("q.conv2.w", self.conv2.w.view_mut().into_dyn());
        f("q.conv2.b", self.conv2.b.view_mut().into_dyn());
        f("q.fc.w", self.fc.w.view_mut().into_dyn());
        f("q.fc.b", self.fc.b.view_mut().into_dyn());
        f("q.value.w", self.value.w.view_mut().into_dyn());
        f("q.value.b", self.value.b.view_mut().into_dyn());
        f("q.advantage.w", self.advantage.w.view_mut().into_dyn());
        f("q.advantage.b", self.advantage.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn combine_hand_fixture() {
        // V=2, A=(1,0,-1) -> Q=(3,2,1)
        let v = arr2(&[[2.0f64]]);
        let a = arr2(&[[1.0, 0.0, -1.0]]);
        let q = dueling_combine(&v, &a);
        assert_eq!(q, arr2(&[[3.0, 2.0, 1.0]]));
    }

    #[test]
    fn constant_advantage_gives_value() {
        let v = arr2(&[[1.5f64]]);
        let a = arr2(&[[4.0, 4.0, 4.0, 4.0]]);
        let q = dueling_combine(&v, &a);
        for &x in q.iter() {
            assert!((x - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn advantage_shift_invariance() {
        let v = arr2(&[[0.7f64]]);
        let a = arr2(&[[0.3, -0.2, 1.4]]);
        let q1 = dueling_combine(&v, &a);
        let q2 = dueling_combine(&v, &a.mapv(|x| x + 10.0));
        for (x, y) in q1.iter().zip(q2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
