//! Mirrored decoder: nearest-neighbour upsampling back to 4x84x84.

use super::adam::Adam;
use super::conv::{Conv2d, Conv2dGrad};
use super::init::{self, LEAKY_SLOPE};
use super::layers::{
    leaky_relu, leaky_relu_backward_inplace, upsample2x, upsample2x_backward,
};
use super::{Float, ParamSet, FEAT_CHANNELS, STACK};
use ndarray::Array4;
use rand_chacha::ChaCha20Rng;

/// Channel widths of the two intermediate decoder stages.
#[derive(Debug, Clone, Copy)]
pub struct DecoderWidths {
    pub mid: usize,
    pub late: usize,
}

impl Default for DecoderWidths {
    fn default() -> Self {
        DecoderWidths { mid: 16, late: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<F> {
    pub conv_a: Conv2d<F>,
    pub conv_b: Conv2d<F>,
    pub conv_out: Conv2d<F>,
}

pub struct DecoderCache<F> {
    feat_up: Array4<F>,
    a1: Array4<F>,
    r1_up: Array4<F>,
    a2: Array4<F>,
    r2: Array4<F>,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads<F> {
    pub conv_a: Conv2dGrad<F>,
    pub conv_b: Conv2dGrad<F>,
    pub conv_out: Conv2dGrad<F>,
}

impl<F: Float> Decoder<F> {
    pub fn new(rng: &mut ChaCha20Rng, widths: DecoderWidths) -> Self {
        let conv = |rng: &mut ChaCha20Rng, ci: usize, co: usize| Conv2d {
            w: init::conv_weights(rng, co, ci, 3),
            b: init::zero_bias(co),
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        Decoder {
            conv_a: conv(rng, FEAT_CHANNELS, widths.mid),
            conv_b: conv(rng, widths.mid, widths.late),
            conv_out: conv(rng, widths.late, STACK),
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads<F> {
        DecoderGrads {
            conv_a: Conv2dGrad::zeros_like(&self.conv_a),
            conv_b: Conv2dGrad::zeros_like(&self.conv_b),
            conv_out: Conv2dGrad::zeros_like(&self.conv_out),
        }
    }

    /// `(N, 32, 21, 21)` features to a `(N, 4, 84, 84)` reconstruction.
    /// The output stays linear so a zero network reproduces a zero state.
    pub fn forward(&self, feat: &Array4<F>) -> (Array4<F>, DecoderCache<F>) {
        let feat_up = upsample2x(feat);
        let a1 = self.conv_a.forward(&feat_up);
        let r1 = leaky_relu(&a1, LEAKY_SLOPE);
        let r1_up = upsample2x(&r1);
        let a2 = self.conv_b.forward(&r1_up);
        let r2 = leaky_relu(&a2, LEAKY_SLOPE);
        let y = self.conv_out.forward(&r2);
        (
            y,
            DecoderCache {
                feat_up,
                a1,
                r1_up,
                a2,
                r2,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &DecoderCache<F>,
        dy: &Array4<F>,
        grads: &mut DecoderGrads<F>,
    ) -> Array4<F> {
        let mut da2 = self
            .conv_out
            .backward(&cache.r2, dy, &mut grads.conv_out, true)
            .expect("dx requested");
        leaky_relu_backward_inplace(&cache.a2, &mut da2, LEAKY_SLOPE);
        let dr1_up = self
            .conv_b
            .backward(&cache.r1_up, &da2, &mut grads.conv_b, true)
            .expect("dx requested");
        let mut da1 = upsample2x_backward(&dr1_up);
        leaky_relu_backward_inplace(&cache.a1, &mut da1, LEAKY_SLOPE);
        let dfeat_up = self
            .conv_a
            .backward(&cache.feat_up, &da1, &mut grads.conv_a, true)
            .expect("dx requested");
        upsample2x_backward(&dfeat_up)
    }

    pub fn apply_grads(&mut self, grads: &DecoderGrads<F>, opt: &mut Adam<F>) {
        opt.update(self.conv_a.w.view_mut().into_dyn(), grads.conv_a.w.view().into_dyn());
        opt.update(self.conv_a.b.view_mut().into_dyn(), grads.conv_a.b.view().into_dyn());
        opt.update(self.conv_b.w.view_mut().into_dyn(), grads.conv_b.w.view().into_dyn());
        opt.update(self.conv_b.b.view_mut().into_dyn(), grads.conv_b.b.view().into_dyn());
        opt.update(self.conv_out.w.view_mut().into_dyn(), grads.conv_out.w.view().into_dyn());
        opt.update(self.conv_out.b.view_mut().into_dyn(), grads.conv_out.b.view().into_dyn());
    }
}

impl<F: Float> ParamSet<F> for Decoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        f("decoder.conv_a.w", self.conv_a.w.view().into_dyn());
        f("decoder.conv_a.b", self.conv_a.b.view().into_dyn());
        f("decoder.conv_b.w", self.conv_b.w.view().into_dyn());
        f("decoder.conv_b.b", self.conv_b.b.view().into_dyn());
        f("decoder.conv_out.w", self.conv_out.w.view().into_dyn());
        f("decoder.conv_out.b", self.conv_out.b.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        f("decoder.conv_a.w", self.conv_a.w.view_mut().into_dyn());
        f("decoder.conv_a.b", self.conv_a.b.view_mut().into_dyn());
        f("decoder.conv_b.w", self.conv_b.w.view_mut().into_dyn());
        f("decoder.conv_b.b", self.conv_b.b.view_mut().into_dyn());
        f("decoder.conv_out.w", self.conv_out.w.view_mut().into_dyn());
        f("decoder.conv_out.b", self.conv_out.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn decoder_restores_state_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dec = Decoder::<f32>::new(&mut rng, DecoderWidths::default());
        let feat = Array4::<f32>::zeros((2, FEAT_CHANNELS, 21, 21));
        let (y, _) = dec.forward(&feat);
        assert_eq!(y.shape(), &[2, STACK, 84, 84]);
    }
}
