//! Autoencoder pre-training for the shared encoder.
//!
//! Trained on states from both player kinds; the resulting encoder weights
//! seed the attention and gaze networks and provide the frozen feature
//! space for the Q-learning agents.

use crate::data::{states_to_batch, State};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::decoder::{Decoder, DecoderWidths};
use crate::nn::encoder::{Downsample, Encoder};
use crate::nn::{Float, ParamSet};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone)]
pub struct Autoencoder<F> {
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

impl<F: Float> Autoencoder<F> {
    pub fn new(rng: &mut ChaCha20Rng, widths: DecoderWidths) -> Self {
        Autoencoder {
            encoder: Encoder::new(rng, Downsample::BlurPool),
            decoder: Decoder::new(rng, widths),
        }
    }

    /// Encode then decode; output has the input state shape `(N, 4, 84, 84)`.
    pub fn reconstruct(&self, states: &Array4<F>) -> Array4<F> {
        let (feat, _) = self.encoder.forward(states);
        self.decoder.forward(&feat).0
    }
}

impl<F: Float> ParamSet<F> for Autoencoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub decoder_widths_mid: usize,
    pub decoder_widths_late: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 32,
            decoder_widths_mid: 16,
            decoder_widths_late: 8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AeEpochReport {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn mse<F: Float>(a: &Array4<F>, b: &Array4<F>) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc / crate::nn::c::<F>(a.len() as f64)
}

/// Trains the autoencoder by mean-squared reconstruction; returns the model,
/// per-epoch reports and the initial validation error for reference.
pub fn train_autoencoder(
    train_states: &[&State],
    val_states: &[&State],
    cfg: &AeTrainConfig,
    seed: u64,
) -> Result<(Autoencoder<f32>, Vec<AeEpochReport>, f64)> {
    if train_states.is_empty() {
        return Err(Error::data("autoencoder training set is empty"));
    }
    let train = states_to_batch(train_states);
    let val = states_to_batch(val_states);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model = Autoencoder::<f32>::new(
        &mut rng,
        DecoderWidths {
            mid: cfg.decoder_widths_mid,
            late: cfg.decoder_widths_late,
        },
    );
    let val_mse_of = |model: &Autoencoder<f32>| -> f64 {
        if val.shape()[0] == 0 {
            return f64::NAN;
        }
        mse(&model.reconstruct(&val), &val) as f64
    };
    let initial_val_mse = val_mse_of(&model);

    let mut opt = Adam::new(cfg.learning_rate);
    let n = train.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather(&train, chunk);
            let (feat, enc_cache) = model.encoder.forward(&x);
            let (y, dec_cache) = model.decoder.forward(&feat);
            let loss = mse(&y, &x);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "autoencoder loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += loss as f64;
            batches += 1;
            // d(mse)/dy = 2 (y - x) / len
            let scale = 2.0f32 / y.len() as f32;
            let mut dy = &y - &x;
            dy.mapv_inplace(|v| v * scale);
            let mut dec_grads = model.decoder.zero_grads();
            let dfeat = model.decoder.backward(&dec_cache, &dy, &mut dec_grads);
            let mut enc_grads = model.encoder.zero_grads();
            model.encoder.backward(&enc_cache, &dfeat, &mut enc_grads);
            opt.begin_step();
            model.encoder.apply_grads(&enc_grads, &mut opt);
            model.decoder.apply_grads(&dec_grads, &mut opt);
        }
        reports.push(AeEpochReport {
            epoch,
            train_mse: epoch_loss / batches.max(1) as f64,
            val_mse: val_mse_of(&model),
        });
    }
    Ok((model, reports, initial_val_mse))
}

fn gather(src: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let mut out = Array4::zeros((idx.len(), src.shape()[1], src.shape()[2], src.shape()[3]));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&src.index_axis(ndarray::Axis(0), i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Frame;
    use ndarray::Array2;
    use std::sync::Arc;

    fn zero_state() -> State {
        let f = Arc::new(Frame::new(Array2::zeros((84, 84)), (84, 84)).unwrap());
        State {
            frames: [f.clone(), f.clone(), f.clone(), f],
        }
    }

    #[test]
    fn constant_zero_dataset_converges_to_zero_error() {
        let states: Vec<State> = (0..8).map(|_| zero_state()).collect();
        let refs: Vec<&State> = states.iter().collect();
        let cfg = AeTrainConfig {
            epochs: 50,
            ..AeTrainConfig::default()
        };
        let (model, reports, _) = train_autoencoder(&refs, &refs[..2], &cfg, 0).unwrap();
        let last = reports.last().unwrap();
        assert!(
            last.train_mse < 1e-6,
            "reconstruction error {} should approach zero",
            last.train_mse
        );
        // zero input, trained-to-zero output
        let x = states_to_batch(&refs[..1]);
        let y = model.reconstruct(&x);
        assert!(mse(&y, &x) < 1e-6);
    }

    #[test]
    fn reconstruction_shape_matches_state() {
        let states: Vec<State> = (0..4).map(|_| zero_state()).collect();
        let refs: Vec<&State> = states.iter().collect();
        let cfg = AeTrainConfig {
            epochs: 1,
            ..AeTrainConfig::default()
        };
        let (model, _, _) = train_autoencoder(&refs, &refs[..1], &cfg, 0).unwrap();
        let x = states_to_batch(&refs);
        assert_eq!(model.reconstruct(&x).shape(), &[4, 4, 84, 84]);
    }

    #[test]
    fn zero_params_zero_input_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut model = Autoencoder::<f32>::new(&mut rng, DecoderWidths::default());
        model.visit_mut(&mut |_, mut v| v.fill(0.0));
        let x = Array4::zeros((1, 4, 84, 84));
        let y = model.reconstruct(&x);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
