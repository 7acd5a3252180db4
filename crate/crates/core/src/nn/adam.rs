//! Adaptive-moment optimizer with slots assigned by call order.

use super::{c, Float};
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

struct Slot<F> {
    m: ArrayD<F>,
    v: ArrayD<F>,
}

/// Adam. Each training step must call [`Adam::begin_step`] once and then
/// update every parameter in the same fixed order, which assigns moment
/// slots deterministically.
pub struct Adam<F> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    cursor: usize,
    slots: Vec<Slot<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            cursor: 0,
            slots: Vec::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
        self.cursor = 0;
    }

    pub fn update(&mut self, mut param: ArrayViewMutD<'_, F>, grad: ArrayViewD<'_, F>) {
        if self.cursor == self.slots.len() {
            self.slots.push(Slot {
                m: ArrayD::zeros(param.raw_dim()),
                v: ArrayD::zeros(param.raw_dim()),
            });
        }
        let slot = &mut self.slots[self.cursor];
        self.cursor += 1;
        debug_assert_eq!(slot.m.shape(), param.shape(), "slot order mismatch");
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let one = F::one();
        let corr1 = c::<F>(1.0 - self.beta1.powi(self.t));
        let corr2 = c::<F>(1.0 - self.beta2.powi(self.t));
        let lr = c::<F>(self.lr);
        let eps = c::<F>(self.eps);
        ndarray::Zip::from(&mut param)
            .and(&mut slot.m)
            .and(&mut slot.v)
            .and(&grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = arr1(&[0.0f64]).into_dyn();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = arr1(&[2.0 * (x[[0]] - 3.0)]).into_dyn();
            opt.begin_step();
            opt.update(x.view_mut(), g.view());
        }
        assert!((x[[0]] - 3.0).abs() < 1e-3);
    }
}
