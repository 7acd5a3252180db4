//! Network building blocks with hand-written forward/backward passes.
//!
//! All blocks operate on batched `(N, C, H, W)` tensors and are generic over
//! the element type so the same code runs in `f32` for training and in `f64`
//! for finite-difference gradient verification.

pub mod action;
pub mod adam;
pub mod context;
pub mod conv;
pub mod decoder;
pub mod dueling;
pub mod encoder;
pub mod fd;
pub mod head;
pub mod init;
pub mod layers;

use ndarray::{ArrayViewD, ArrayViewMutD};

/// Element type for network computation.
pub trait Float: ndarray::NdFloat + num_traits::FromPrimitive {}
impl Float for f32 {}
impl Float for f64 {}

/// Shorthand for converting an `f64` constant into the element type.
#[inline]
pub fn c<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("constant conversion")
}

/// Input frame side length in pixels.
pub const FRAME_SIZE: usize = 84;
/// Number of stacked frames per state.
pub const STACK: usize = 4;
/// Spatial side length of the encoded feature space.
pub const GRID: usize = 21;
/// Channel count of the encoded feature space.
pub const FEAT_CHANNELS: usize = 32;
/// Number of spatial cells in an attention map.
pub const N_CELLS: usize = GRID * GRID;

/// Uniform access to a network's parameters in a fixed order.
///
/// Checkpointing, checksums and gradient checks are all built on top of this.
pub trait ParamSet<F: Float> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, v| out.extend(v.iter().copied()));
        out
    }

    fn assign_flat(&mut self, flat: &[F]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, mut v| {
            for x in v.iter_mut() {
                *x = flat[pos];
                pos += 1;
            }
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }
}
