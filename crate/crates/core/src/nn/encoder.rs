//! Three-stage convolutional encoder: 4x84x84 states to 32x21x21 features.
//!
//! The default configuration downsamples with an anti-aliased blur kernel;
//! the `Stride2` variant folds the stride into the convolutions instead and
//! exists for the shift-robustness comparison.

use super::adam::Adam;
use super::conv::{Conv2d, Conv2dGrad};
use super::init::{self, LEAKY_SLOPE};
use super::layers::{
    blur_pool, blur_pool_backward, leaky_relu, leaky_relu_backward, leaky_relu_backward_inplace,
};
use super::{Float, ParamSet, FEAT_CHANNELS, FRAME_SIZE, GRID, STACK};
use ndarray::Array4;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsample {
    /// conv(s=1) followed by an anti-aliased blur with stride 2.
    BlurPool,
    /// plain conv with stride 2, no anti-aliasing.
    Stride2,
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub conv3: Conv2d<F>,
    pub mode: Downsample,
}

pub struct EncoderCache<F> {
    x: Array4<F>,
    a1: Array4<F>,
    s1: Array4<F>,
    a2: Array4<F>,
    s2: Array4<F>,
    a3: Array4<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads<F> {
    pub conv1: Conv2dGrad<F>,
    pub conv2: Conv2dGrad<F>,
    pub conv3: Conv2dGrad<F>,
}

impl<F: Float> Encoder<F> {
    pub fn new(rng: &mut ChaCha20Rng, mode: Downsample) -> Self {
        let stride = match mode {
            Downsample::BlurPool => 1,
            Downsample::Stride2 => 2,
        };
        let conv = |rng: &mut ChaCha20Rng, ci: usize, co: usize, s: usize| Conv2d {
            w: init::conv_weights(rng, co, ci, 3),
            b: init::zero_bias(co),
            stride: s,
            pad: 1,
            dilation: 1,
        };
        Encoder {
            conv1: conv(rng, STACK, FEAT_CHANNELS, stride),
            conv2: conv(rng, FEAT_CHANNELS, FEAT_CHANNELS, stride),
            conv3: conv(rng, FEAT_CHANNELS, FEAT_CHANNELS, 1),
            mode,
        }
    }

    pub fn zero_grads(&self) -> EncoderGrads<F> {
        EncoderGrads {
            conv1: Conv2dGrad::zeros_like(&self.conv1),
            conv2: Conv2dGrad::zeros_like(&self.conv2),
            conv3: Conv2dGrad::zeros_like(&self.conv3),
        }
    }

    /// `x` has shape `(N, 4, 84, 84)`; the result is `(N, 32, 21, 21)`.
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, EncoderCache<F>) {
        debug_assert_eq!(&x.shape()[1..], &[STACK, FRAME_SIZE, FRAME_SIZE]);
        let a1 = self.conv1.forward(x);
        let r1 = leaky_relu(&a1, LEAKY_SLOPE);
        let s1 = match self.mode {
            Downsample::BlurPool => blur_pool(&r1),
            Downsample::Stride2 => r1,
        };
        let a2 = self.conv2.forward(&s1);
        let r2 = leaky_relu(&a2, LEAKY_SLOPE);
        let s2 = match self.mode {
            Downsample::BlurPool => blur_pool(&r2),
            Downsample::Stride2 => r2,
        };
        let a3 = self.conv3.forward(&s2);
        let feat = leaky_relu(&a3, LEAKY_SLOPE);
        debug_assert_eq!(&feat.shape()[1..], &[FEAT_CHANNELS, GRID, GRID]);
        (
            feat,
            EncoderCache {
                x: x.clone(),
                a1,
                s1,
                a2,
                s2,
                a3,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        dfeat: &Array4<F>,
        grads: &mut EncoderGrads<F>,
    ) {
        let da3 = leaky_relu_backward(&cache.a3, dfeat, LEAKY_SLOPE);
        let ds2 = self
            .conv3
            .backward(&cache.s2, &da3, &mut grads.conv3, true)
            .expect("dx requested");
        let mut da2 = match self.mode {
            Downsample::BlurPool => {
                blur_pool_backward(&ds2, cache.a2.shape()[2], cache.a2.shape()[3])
            }
            Downsample::Stride2 => ds2,
        };
        leaky_relu_backward_inplace(&cache.a2, &mut da2, LEAKY_SLOPE);
        let ds1 = self
            .conv2
            .backward(&cache.s1, &da2, &mut grads.conv2, true)
            .expect("dx requested");
        let mut da1 = match self.mode {
            Downsample::BlurPool => {
                blur_pool_backward(&ds1, cache.a1.shape()[2], cache.a1.shape()[3])
            }
            Downsample::Stride2 => ds1,
        };
        leaky_relu_backward_inplace(&cache.a1, &mut da1, LEAKY_SLOPE);
        self.conv1.backward(&cache.x, &da1, &mut grads.conv1, false);
    }

    pub fn apply_grads(&mut self, grads: &EncoderGrads<F>, opt: &mut Adam<F>) {
        opt.update(self.conv1.w.view_mut().into_dyn(), grads.conv1.w.view().into_dyn());
        opt.update(self.conv1.b.view_mut().into_dyn(), grads.conv1.b.view().into_dyn());
        opt.update(self.conv2.w.view_mut().into_dyn(), grads.conv2.w.view().into_dyn());
        opt.update(self.conv2.b.view_mut().into_dyn(), grads.conv2.b.view().into_dyn());
        opt.update(self.conv3.w.view_mut().into_dyn(), grads.conv3.w.view().into_dyn());
        opt.update(self.conv3.b.view_mut().into_dyn(), grads.conv3.b.view().into_dyn());
    }
}

impl<F: Float> ParamSet<F> for Encoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        f("encoder.conv1.w", self.conv1.w.view().into_dyn());
        f("encoder.conv1.b", self.conv1.b.view().into_dyn());
        f("encoder.conv2.w", self.conv2.w.view().into_dyn());
        f("encoder.conv2.b", self.conv2.b.view().into_dyn());
        f("encoder.conv3.w", self.conv3.w.view().into_dyn());
        f("encoder.conv3.b", self.conv3.b.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        f("encoder.conv1.w", self.conv1.w.view_mut().into_dyn());
        f("encoder.conv1.b", self.conv1.b.view_mut().into_dyn());
        f("encoder.conv2.w", self.conv2.w.view_mut().into_dyn());
        f("encoder.conv2.b", self.conv2.b.view_mut().into_dyn());
        f("encoder.conv3.w", self.conv3.w.view_mut().into_dyn());
        f("encoder.conv3.b", self.conv3.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_shape_is_32x21x21() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(&mut rng, Downsample::BlurPool);
        let x = Array4::<f32>::zeros((2, STACK, FRAME_SIZE, FRAME_SIZE));
        let (feat, _) = enc.forward(&x);
        assert_eq!(feat.shape(), &[2, FEAT_CHANNELS, GRID, GRID]);

        let enc2 = Encoder::<f32>::new(&mut rng, Downsample::Stride2);
        let (feat2, _) = enc2.forward(&x);
        assert_eq!(feat2.shape(), &[2, FEAT_CHANNELS, GRID, GRID]);
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_features() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let enc = Encoder::<f32>::new(&mut rng, Downsample::BlurPool);
        let x = Array4::<f32>::zeros((1, STACK, FRAME_SIZE, FRAME_SIZE));
        let (feat, _) = enc.forward(&x);
        assert!(feat.iter().all(|&v| v == 0.0));
    }
}
