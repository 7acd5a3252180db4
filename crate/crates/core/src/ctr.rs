//! Joint training of the sparsity-controlled attention network and the
//! action predictor.
//!
//! The attention network maps a state and a sparsity input to a soft
//! attention map over feature cells. During training, target features are
//! overlaid on an independently sampled source state in a blended feature
//! space; the action predictor must still recover the target action, which
//! pushes attention values toward 0 or 1. Two relative sparsity penalties
//! tie the mean activation of each map to its sparsity input, with a
//! schedule that shifts from symmetric tracking to a pure ceiling.

use crate::data::Transition;
use crate::error::{Error, Result};
use crate::nn::action::{ActionPredictor, ActionPredictorWidths};
use crate::nn::adam::Adam;
use crate::nn::encoder::Encoder;
use crate::nn::head::{ContextHead, MapActivation};
use crate::nn::layers::log_softmax_rows;
use crate::nn::{c, Float, FEAT_CHANNELS, GRID, N_CELLS};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stabilizer in the relative sparsity penalties.
pub const SPARSITY_EPS: f64 = 1e-6;

/// The attention network: shared encoder plus a sigmoid context head with a
/// sparsity input channel.
#[derive(Clone)]
pub struct CtrModel<F> {
    pub encoder: Encoder<F>,
    pub head: ContextHead<F>,
}

impl<F: Float> CtrModel<F> {
    pub fn new(rng: &mut ChaCha20Rng, encoder: Encoder<F>, pw_width: usize) -> Self {
        CtrModel {
            encoder,
            head: ContextHead::new(rng, pw_width, true, MapActivation::Sigmoid),
        }
    }

    /// Attention maps `(N, 1, 21, 21)` for states and per-sample sparsity
    /// inputs in `[0, 1]`.
    pub fn attention(&self, states: &Array4<F>, lambda: &Array1<F>) -> Result<Array4<F>> {
        validate_lambda(lambda)?;
        let (feat, _) = self.encoder.forward(states);
        Ok(self.head.forward(&feat, Some(lambda)).0)
    }

    /// Attention from precomputed features.
    pub fn attention_from_features(
        &self,
        feat: &Array4<F>,
        lambda: &Array1<F>,
    ) -> Result<Array4<F>> {
        validate_lambda(lambda)?;
        Ok(self.head.forward(feat, Some(lambda)).0)
    }
}

fn validate_lambda<F: Float>(lambda: &Array1<F>) -> Result<()> {
    if lambda
        .iter()
        .any(|&l| l < F::zero() || l > F::one() || !l.is_finite())
    {
        return Err(Error::config("sparsity input must lie in [0, 1]"));
    }
    Ok(())
}

pub struct BlendCache<F> {
    f_t: Array4<F>,
    f_s: Array4<F>,
    psi_t: Array4<F>,
    psi_s: Array4<F>,
    root: Array4<F>,
}

/// Blended feature space
/// `F_B = F_T (.) Psi_T + F_S (.) ((1 - Psi_T)(1 - Psi_S))^(1/2)`,
/// with the maps broadcast over the 32 feature channels.
pub fn blend<F: Float>(
    f_t: &Array4<F>,
    psi_t: &Array4<F>,
    f_s: &Array4<F>,
    psi_s: &Array4<F>,
) -> Result<(Array4<F>, BlendCache<F>)> {
    let n = f_t.shape()[0];
    if f_s.shape() != f_t.shape()
        || psi_t.shape() != [n, 1, GRID, GRID]
        || psi_s.shape() != [n, 1, GRID, GRID]
    {
        return Err(Error::config("blend shapes do not conform"));
    }
    for m in [psi_t, psi_s] {
        if m.iter().any(|&v| v < F::zero() || v > F::one()) {
            return Err(Error::config("attention maps must lie in [0, 1]"));
        }
    }
    let mut root = Array4::zeros(psi_t.raw_dim());
    ndarray::Zip::from(&mut root)
        .and(psi_t)
        .and(psi_s)
        .for_each(|r, &pt, &ps| {
            *r = ((F::one() - pt) * (F::one() - ps)).sqrt();
        });
    let mut out = Array4::zeros(f_t.raw_dim());
    {
        let os = out.as_slice_mut().expect("contiguous");
        let ft = f_t.as_slice().expect("contiguous");
        let fs = f_s.as_slice().expect("contiguous");
        let pt = psi_t.as_slice().expect("contiguous");
        let rt = root.as_slice().expect("contiguous");
        for i in 0..n {
            for ch in 0..FEAT_CHANNELS {
                let base = (i * FEAT_CHANNELS + ch) * N_CELLS;
                let map = i * N_CELLS;
                for cell in 0..N_CELLS {
                    os[base + cell] =
                        ft[base + cell] * pt[map + cell] + fs[base + cell] * rt[map + cell];
                }
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("blend produced non-finite values"));
    }
    Ok((
        out,
        BlendCache {
            f_t: f_t.clone(),
            f_s: f_s.clone(),
            psi_t: psi_t.clone(),
            psi_s: psi_s.clone(),
            root,
        },
    ))
}

/// Gradients of the blend w.r.t. both feature tensors and both maps.
pub fn blend_backward<F: Float>(
    cache: &BlendCache<F>,
    d_out: &Array4<F>,
) -> (Array4<F>, Array4<F>, Array4<F>, Array4<F>) {
    let (n, ch) = (d_out.shape()[0], d_out.shape()[1]);
    let mut d_ft = Array4::zeros(cache.f_t.raw_dim());
    let mut d_fs = Array4::zeros(cache.f_s.raw_dim());
    let mut d_pt = Array4::zeros(cache.psi_t.raw_dim());
    let mut d_ps = Array4::zeros(cache.psi_s.raw_dim());
    let go = d_out.as_slice().expect("contiguous");
    let ft = cache.f_t.as_slice().expect("contiguous");
    let fs = cache.f_s.as_slice().expect("contiguous");
    let pts = cache.psi_t.as_slice().expect("contiguous");
    let pss = cache.psi_s.as_slice().expect("contiguous");
    let rts = cache.root.as_slice().expect("contiguous");
    let dfts = d_ft.as_slice_mut().expect("contiguous");
    let dfss = d_fs.as_slice_mut().expect("contiguous");
    let dpts = d_pt.as_slice_mut().expect("contiguous");
    let dpss = d_ps.as_slice_mut().expect("contiguous");
    let two = c::<F>(2.0);
    for i in 0..n {
        let map = i * N_CELLS;
        for cell in 0..N_CELLS {
            let pt = pts[map + cell];
            let ps = pss[map + cell];
            let root = rts[map + cell];
            // d root / d pt = -(1 - ps) / (2 root); maps that hit exactly 1
            // have no source contribution so the derivative is moot there
            let (droot_dpt, droot_dps) = if root > F::zero() {
                (
                    -(F::one() - ps) / (two * root),
                    -(F::one() - pt) / (two * root),
                )
            } else {
                (F::zero(), F::zero())
            };
            let mut acc_pt = F::zero();
            let mut acc_ps = F::zero();
            for cc in 0..ch {
                let idx = (i * ch + cc) * N_CELLS + cell;
                let g = go[idx];
                dfts[idx] = g * pt;
                dfss[idx] = g * root;
                acc_pt += g * (ft[idx] + fs[idx] * droot_dpt);
                acc_ps += g * fs[idx] * droot_dps;
            }
            dpts[map + cell] = acc_pt;
            dpss[map + cell] = acc_ps;
        }
    }
    (d_ft, d_pt, d_fs, d_ps)
}

/// Per-sample mean activation of attention maps `(N, 1, G, G)`.
pub fn mean_activation<F: Float>(psi: &Array4<F>) -> Array1<F> {
    let n = psi.shape()[0];
    let denom = c::<F>(N_CELLS as f64);
    Array1::from_iter((0..n).map(|i| psi.index_axis(Axis(0), i).sum() / denom))
}

/// Relative sparsity penalties over a batch whose sparsity inputs are tiled
/// by sample index (`sample j` belongs to group `j % n_lambda`). Sample
/// terms are averaged within each group, then across groups:
///
/// * `l1 = (1/n) sum_i mean_j |psi_bar_j - lambda_i| / (|lambda_i| + eps)`
/// * `l2` keeps only terms with `psi_bar_j > lambda_i` (over-activation).
pub fn sparsity_losses<F: Float>(psi_bar: &Array1<F>, lambda: &Array1<F>, n_lambda: usize) -> (F, F) {
    let (l1, l2, _) = sparsity_losses_with_grad(psi_bar, lambda, n_lambda);
    (l1, l2)
}

/// As [`sparsity_losses`], also returning the per-sample gradient pair
/// `(d l1 / d psi_bar_j, d l2 / d psi_bar_j)`.
pub fn sparsity_losses_with_grad<F: Float>(
    psi_bar: &Array1<F>,
    lambda: &Array1<F>,
    n_lambda: usize,
) -> (F, F, Vec<(F, F)>) {
    let n = psi_bar.len();
    assert_eq!(n, lambda.len());
    let groups = n_lambda.min(n).max(1);
    let eps = c::<F>(SPARSITY_EPS);
    let mut group_size = vec![0usize; groups];
    for j in 0..n {
        group_size[j % groups] += 1;
    }
    let mut l1 = F::zero();
    let mut l2 = F::zero();
    let mut grads = vec![(F::zero(), F::zero()); n];
    let inv_groups = F::one() / c::<F>(groups as f64);
    for j in 0..n {
        let g = j % groups;
        let lam = lambda[j];
        let diff = psi_bar[j] - lam;
        let denom = lam.abs() + eps;
        let weight = inv_groups / c::<F>(group_size[g] as f64);
        l1 += weight * diff.abs() / denom;
        let sign = if diff > F::zero() {
            F::one()
        } else if diff < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        let d1 = weight * sign / denom;
        let over = diff > F::zero();
        if over {
            l2 += weight * diff.abs() / denom;
        }
        grads[j] = (d1, if over { d1 } else { F::zero() });
    }
    (l1, l2, grads)
}

/// Loss-weight schedule: `beta = max(0, 1 - epoch / 100)`.
pub fn beta_schedule(epoch: usize) -> f64 {
    (1.0 - epoch as f64 / 100.0).max(0.0)
}

/// Mean cross-entropy of one-hot actions under softmax logits, together
/// with the gradient w.r.t. the logits.
pub fn cross_entropy_loss<F: Float>(
    logits: &Array2<F>,
    actions: &[usize],
) -> (F, Array2<F>) {
    let n = logits.shape()[0];
    assert_eq!(n, actions.len());
    let log_p = log_softmax_rows(logits);
    let mut loss = F::zero();
    for (j, &a) in actions.iter().enumerate() {
        loss -= log_p[[j, a]];
    }
    loss /= c::<F>(n as f64);
    // d/dlogits = (softmax - onehot) / n
    let inv_n = F::one() / c::<F>(n as f64);
    let mut d = log_p.mapv(|v| v.exp());
    for (j, &a) in actions.iter().enumerate() {
        d[[j, a]] -= F::one();
    }
    d.mapv_inplace(|v| v * inv_n);
    (loss, d)
}

/// Loss components of one training step or epoch.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CtrLossReport {
    pub epoch: usize,
    pub l_total: f64,
    pub l_ap_blend: f64,
    pub l_ap: f64,
    pub l_lambda1: f64,
    pub l_lambda2: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CtrTrainConfig {
    /// Training epochs; the pipeline contract expects at least 300.
    pub epochs: usize,
    pub lr_action: f64,
    pub lr_attention: f64,
    pub batch_size: usize,
    pub n_lambda: usize,
    /// Log-uniform sparsity sampling range.
    pub lambda_range: (f64, f64),
    pub feature_blending: bool,
    pub freeze_encoder: bool,
    pub pw_width: usize,
    pub ap_widths: ActionPredictorWidths,
}

impl Default for CtrTrainConfig {
    fn default() -> Self {
        CtrTrainConfig {
            epochs: 300,
            lr_action: 1e-3,
            lr_attention: 5e-4,
            batch_size: 32,
            n_lambda: 6,
            lambda_range: (0.01, 1.0),
            feature_blending: true,
            freeze_encoder: true,
            pw_width: 32,
            ap_widths: ActionPredictorWidths::default(),
        }
    }
}

/// Jointly trained attention network and action predictor.
pub struct CtrOutcome {
    pub model: CtrModel<f32>,
    pub predictor: ActionPredictor<f32>,
    pub reports: Vec<CtrLossReport>,
}

/// Joint training on a transition set. The encoder starts from the
/// pre-trained autoencoder weights; the action predictor uses `lr_action`
/// and the attention network (and encoder, unless frozen) half that rate by
/// default.
pub fn train_ctr(
    train: &[&Transition],
    ae_encoder: &Encoder<f32>,
    n_actions: usize,
    cfg: &CtrTrainConfig,
    seed: u64,
) -> Result<CtrOutcome> {
    if train.is_empty() {
        return Err(Error::data("attention training set is empty"));
    }
    if cfg.n_lambda == 0 || cfg.batch_size == 0 {
        return Err(Error::config("n_lambda and batch_size must be positive"));
    }
    if !(0.0 < cfg.lambda_range.0 && cfg.lambda_range.0 <= cfg.lambda_range.1)
        || cfg.lambda_range.1 > 1.0
    {
        return Err(Error::config("lambda_range must satisfy 0 < lo <= hi <= 1"));
    }
    let n = train.len();
    let states: Vec<&crate::data::State> = train.iter().map(|t| &t.state).collect();
    let all_states = crate::data::states_to_batch(&states);
    let actions: Vec<usize> = train.iter().map(|t| t.action).collect();
    if actions.iter().any(|&a| a >= n_actions) {
        return Err(Error::data("action index out of range"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model = CtrModel::new(&mut rng, ae_encoder.clone(), cfg.pw_width);
    let mut predictor = ActionPredictor::new(&mut rng, cfg.ap_widths, n_actions);

    let frozen_feat = cfg
        .freeze_encoder
        .then(|| model.encoder.forward(&all_states).0);

    let mut opt_ap = Adam::new(cfg.lr_action);
    let mut opt_ctr = Adam::new(cfg.lr_attention);
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let (lam_lo, lam_hi) = cfg.lambda_range;

    for epoch in 0..cfg.epochs {
        let beta = beta_schedule(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5]; // total, ap_b, ap, l1, l2
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let group_values: Vec<f64> = (0..cfg.n_lambda)
                .map(|_| {
                    let u: f64 = rng.random_range(lam_lo.ln()..=lam_hi.ln());
                    u.exp()
                })
                .collect();
            let lambda = Array1::from_iter(
                (0..chunk.len()).map(|j| group_values[j % cfg.n_lambda] as f32),
            );
            let sources: Vec<usize> = if cfg.feature_blending {
                chunk
                    .iter()
                    .map(|&t| {
                        if n == 1 {
                            return t; // degenerate set; nothing else to draw
                        }
                        loop {
                            let s = rng.random_range(0..n);
                            if s != t {
                                return s;
                            }
                        }
                    })
                    .collect()
            } else {
                Vec::new()
            };

            let report = ctr_step(
                &mut model,
                &mut predictor,
                &all_states,
                frozen_feat.as_ref(),
                &actions,
                chunk,
                &sources,
                &lambda,
                cfg,
                beta,
                epoch,
                &mut opt_ap,
                &mut opt_ctr,
            )?;
            sums[0] += report.l_total;
            sums[1] += report.l_ap_blend;
            sums[2] += report.l_ap;
            sums[3] += report.l_lambda1;
            sums[4] += report.l_lambda2;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        reports.push(CtrLossReport {
            epoch,
            l_total: sums[0] / b,
            l_ap_blend: sums[1] / b,
            l_ap: sums[2] / b,
            l_lambda1: sums[3] / b,
            l_lambda2: sums[4] / b,
            beta,
        });
    }
    Ok(CtrOutcome {
        model,
        predictor,
        reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn ctr_step(
    model: &mut CtrModel<f32>,
    predictor: &mut ActionPredictor<f32>,
    all_states: &Array4<f32>,
    frozen_feat: Option<&Array4<f32>>,
    actions: &[usize],
    chunk: &[usize],
    sources: &[usize],
    lambda: &Array1<f32>,
    cfg: &CtrTrainConfig,
    beta: f64,
    epoch: usize,
    opt_ap: &mut Adam<f32>,
    opt_ctr: &mut Adam<f32>,
) -> Result<CtrLossReport> {
    let chunk_actions: Vec<usize> = chunk.iter().map(|&t| actions[t]).collect();

    // features for targets (and sources when blending)
    let (f_t, enc_cache_t) = match frozen_feat {
        Some(cached) => (gather4(cached, chunk), None),
        None => {
            let s = gather4(all_states, chunk);
            let (f, c) = model.encoder.forward(&s);
            (f, Some(c))
        }
    };
    let (psi_t, head_cache_t) = model.head.forward(&f_t, Some(lambda));

    let mut head_grads = model.head.zero_grads();
    let mut ap_grads = predictor.zero_grads();
    let mut enc_grads = (!cfg.freeze_encoder).then(|| model.encoder.zero_grads());

    // blended branch
    let (l_ap_b, d_ft_blend, d_psi_t_blend, source_back) = if cfg.feature_blending {
        let (f_s, enc_cache_s) = match frozen_feat {
            Some(cached) => (gather4(cached, sources), None),
            None => {
                let s = gather4(all_states, sources);
                let (f, c) = model.encoder.forward(&s);
                (f, Some(c))
            }
        };
        let (psi_s, head_cache_s) = model.head.forward(&f_s, Some(lambda));
        let (f_b, blend_cache) = blend(&f_t, &psi_t, &f_s, &psi_s)?;
        let (logits_b, ap_cache_b) = predictor.forward(&f_b);
        let (l_ap_b, dlogits_b) = cross_entropy_loss(&logits_b, &chunk_actions);
        let d_fb = predictor
            .backward(&ap_cache_b, &dlogits_b, &mut ap_grads, true)
            .expect("dfeat requested");
        let (d_ft, d_pt, d_fs, d_ps) = blend_backward(&blend_cache, &d_fb);
        // propagate the source half immediately
        let (d_fs_head, _) = model.head.backward(
            &head_cache_s,
            &d_ps,
            &mut head_grads,
            enc_grads.is_some(),
        );
        if let (Some(enc_grads), Some(cache_s)) = (enc_grads.as_mut(), &enc_cache_s) {
            let mut d_fs_total = d_fs.clone();
            d_fs_total += &d_fs_head.expect("dfeat requested");
            model.encoder.backward(cache_s, &d_fs_total, enc_grads);
        }
        (l_ap_b as f64, Some(d_ft), Some(d_pt), true)
    } else {
        // source pathway removed: F_B = F_T (.) Psi_T
        let f_b = mask_features_soft(&f_t, &psi_t);
        let (logits_b, ap_cache_b) = predictor.forward(&f_b);
        let (l_ap_b, dlogits_b) = cross_entropy_loss(&logits_b, &chunk_actions);
        let d_fb = predictor
            .backward(&ap_cache_b, &dlogits_b, &mut ap_grads, true)
            .expect("dfeat requested");
        let mut d_ft = Array4::zeros(f_t.raw_dim());
        let mut d_pt = Array4::zeros(psi_t.raw_dim());
        {
            let gfb = d_fb.as_slice().expect("contiguous");
            let fts = f_t.as_slice().expect("contiguous");
            let pts = psi_t.as_slice().expect("contiguous");
            let dfts = d_ft.as_slice_mut().expect("contiguous");
            let dpts = d_pt.as_slice_mut().expect("contiguous");
            for i in 0..chunk.len() {
                let map = i * N_CELLS;
                for cell in 0..N_CELLS {
                    let mut acc = 0.0f32;
                    for ch in 0..FEAT_CHANNELS {
                        let idx = (i * FEAT_CHANNELS + ch) * N_CELLS + cell;
                        let g = gfb[idx];
                        dfts[idx] = g * pts[map + cell];
                        acc += g * fts[idx];
                    }
                    dpts[map + cell] = acc;
                }
            }
        }
        (l_ap_b as f64, Some(d_ft), Some(d_pt), false)
    };
    let _ = source_back;

    // full-feature branch
    let (logits, ap_cache) = predictor.forward(&f_t);
    let (l_ap, dlogits) = cross_entropy_loss(&logits, &chunk_actions);
    let d_ft_full = predictor
        .backward(&ap_cache, &dlogits, &mut ap_grads, enc_grads.is_some())
        .map(|d| d);

    // sparsity penalties on the target maps
    let psi_bar = mean_activation(&psi_t);
    let (l1, l2, bar_grads) = sparsity_losses_with_grad(&psi_bar, lambda, cfg.n_lambda);
    let beta_f = beta as f32;
    let mut d_psi_t = d_psi_t_blend.expect("blend branch gradient");
    let cell_scale = 1.0f32 / N_CELLS as f32;
    for (j, &(d1, d2)) in bar_grads.iter().enumerate() {
        let per_cell = (beta_f * d1 + (1.0 - beta_f) * d2) * cell_scale;
        d_psi_t
            .index_axis_mut(Axis(0), j)
            .mapv_inplace(|v| v + per_cell);
    }

    let l_total = l_ap_b + l_ap as f64 + beta * l1 as f64 + (1.0 - beta) * l2 as f64;
    if !l_total.is_finite() {
        return Err(Error::numeric(format!(
            "joint training loss diverged at epoch {epoch}"
        )));
    }

    // target attention backward
    let (d_ft_head, _) = model.head.backward(
        &head_cache_t,
        &d_psi_t,
        &mut head_grads,
        enc_grads.is_some(),
    );
    if let (Some(enc_grads), Some(cache_t)) = (enc_grads.as_mut(), &enc_cache_t) {
        let mut d_ft_total = d_ft_blend.expect("blend gradient");
        d_ft_total += &d_ft_head.expect("dfeat requested");
        if let Some(d_full) = &d_ft_full {
            d_ft_total += d_full;
        }
        model.encoder.backward(cache_t, &d_ft_total, enc_grads);
    }

    opt_ap.begin_step();
    predictor.apply_grads(&ap_grads, opt_ap);
    opt_ctr.begin_step();
    model.head.apply_grads(&head_grads, opt_ctr);
    if let Some(enc_grads) = &enc_grads {
        model.encoder.apply_grads(enc_grads, opt_ctr);
    }

    Ok(CtrLossReport {
        epoch,
        l_total,
        l_ap_blend: l_ap_b,
        l_ap: l_ap as f64,
        l_lambda1: l1 as f64,
        l_lambda2: l2 as f64,
        beta,
    })
}

fn gather4(src: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let mut out = Array4::zeros((idx.len(), src.shape()[1], src.shape()[2], src.shape()[3]));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), k)
            .assign(&src.index_axis(Axis(0), i));
    }
    out
}

/// Applies a soft attention mask: `Psi (.) F` with the map broadcast over
/// channels.
pub fn mask_features_soft<F: Float>(feat: &Array4<F>, psi: &Array4<F>) -> Array4<F> {
    let mut out = feat.clone();
    let (n, ch) = (feat.shape()[0], feat.shape()[1]);
    let os = out.as_slice_mut().expect("contiguous");
    let ps = psi.as_slice().expect("contiguous");
    for i in 0..n {
        let map = i * N_CELLS;
        for cc in 0..ch {
            let base = (i * ch + cc) * N_CELLS;
            for cell in 0..N_CELLS {
                os[base + cell] *= ps[map + cell];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn rng_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn rng_map(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(0.0..1.0))
    }

    #[test]
    fn blend_identities() {
        let n = 3;
        let f_t = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 1);
        let f_s = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 2);
        let ones = Array4::from_elem((n, 1, GRID, GRID), 1.0);
        let zeros = Array4::zeros((n, 1, GRID, GRID));

        // fully attended target reproduces the target
        let (b, _) = blend(&f_t, &ones, &f_s, &zeros).unwrap();
        for (x, y) in b.iter().zip(f_t.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // unattended target over unattended source reproduces the source
        let (b, _) = blend(&f_t, &zeros, &f_s, &zeros).unwrap();
        for (x, y) in b.iter().zip(f_s.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // unattended target over a fully attended source vanishes
        let (b, _) = blend(&f_t, &zeros, &f_s, &ones).unwrap();
        assert!(b.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn blend_matches_elementwise_formula_on_random_maps() {
        let n = 2;
        let f_t = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 3);
        let f_s = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 4);
        let p_t = rng_map((n, 1, GRID, GRID), 5);
        let p_s = rng_map((n, 1, GRID, GRID), 6);
        let (b, _) = blend(&f_t, &p_t, &f_s, &p_s).unwrap();
        for i in 0..n {
            for ch in [0usize, 13, 31] {
                for r in [0usize, 10, 20] {
                    for col in [0usize, 7, 20] {
                        let expect = f_t[[i, ch, r, col]] * p_t[[i, 0, r, col]]
                            + f_s[[i, ch, r, col]]
                                * ((1.0 - p_t[[i, 0, r, col]]) * (1.0 - p_s[[i, 0, r, col]]))
                                    .sqrt();
                        assert!((b[[i, ch, r, col]] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn blend_gradients_match_finite_differences() {
        let n = 1;
        let f_t = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 7);
        let f_s = rng_tensor((n, FEAT_CHANNELS, GRID, GRID), 8);
        let p_t = rng_map((n, 1, GRID, GRID), 9);
        let p_s = rng_map((n, 1, GRID, GRID), 10);
        let loss = |ft: &Array4<f64>, pt: &Array4<f64>, fs: &Array4<f64>, ps: &Array4<f64>| {
            let (b, _) = blend(ft, pt, fs, ps).unwrap();
            b.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let (b, cache) = blend(&f_t, &p_t, &f_s, &p_s).unwrap();
        let (d_ft, d_pt, d_fs, d_ps) = blend_backward(&cache, &b);
        let h = 1e-6;
        let idx = [0usize, 0, 5, 9];
        {
            let mut ft = f_t.clone();
            ft[idx] += h;
            let up = loss(&ft, &p_t, &f_s, &p_s);
            ft[idx] -= 2.0 * h;
            let dn = loss(&ft, &p_t, &f_s, &p_s);
            assert!(((up - dn) / (2.0 * h) - d_ft[idx]).abs() < 1e-6);
        }
        {
            let midx = [0usize, 0, 5, 9];
            let mut pt = p_t.clone();
            pt[midx] += h;
            let up = loss(&f_t, &pt, &f_s, &p_s);
            pt[midx] -= 2.0 * h;
            let dn = loss(&f_t, &pt, &f_s, &p_s);
            assert!(((up - dn) / (2.0 * h) - d_pt[midx]).abs() < 1e-5);
            let mut ps = p_s.clone();
            ps[midx] += h;
            let up = loss(&f_t, &p_t, &f_s, &ps);
            ps[midx] -= 2.0 * h;
            let dn = loss(&f_t, &p_t, &f_s, &ps);
            assert!(((up - dn) / (2.0 * h) - d_ps[midx]).abs() < 1e-5);
            let mut fs = f_s.clone();
            fs[idx] += h;
            let up = loss(&f_t, &p_t, &fs, &p_s);
            fs[idx] -= 2.0 * h;
            let dn = loss(&f_t, &p_t, &fs, &p_s);
            assert!(((up - dn) / (2.0 * h) - d_fs[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn sparsity_fixtures() {
        // single sample, under-activated: penalized by l1 only
        let (l1, l2) = sparsity_losses(&arr1(&[0.02f64]), &arr1(&[0.04]), 1);
        assert!((l1 - 0.02 / (0.04 + 1e-6)).abs() < 1e-9);
        assert!((l1 - 0.4999875).abs() < 1e-4);
        assert_eq!(l2, 0.0);
        // over-activated: both penalties agree
        let (l1, l2) = sparsity_losses(&arr1(&[0.08f64]), &arr1(&[0.04]), 1);
        assert!((l1 - 0.04 / (0.04 + 1e-6)).abs() < 1e-9);
        assert!((l1 - 0.9999750).abs() < 1e-4);
        assert!((l2 - l1).abs() < 1e-12);
        // exact match: both vanish
        let (l1, l2) = sparsity_losses(&arr1(&[0.04f64]), &arr1(&[0.04]), 1);
        assert_eq!((l1, l2), (0.0, 0.0));
    }

    #[test]
    fn l2_is_zero_whenever_under_activated() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..20usize);
            let lambda = Array1::from_shape_simple_fn(n, || rng.random_range(0.01..1.0f64));
            let psi_bar = Array1::from_shape_fn(n, |j| lambda[j] * rng.random_range(0.0..=1.0));
            let (_, l2) = sparsity_losses(&psi_bar, &lambda, 6.min(n));
            assert_eq!(l2, 0.0);
        }
    }

    #[test]
    fn beta_schedule_endpoints() {
        assert_eq!(beta_schedule(0), 1.0);
        assert!((beta_schedule(50) - 0.5).abs() < 1e-12);
        assert_eq!(beta_schedule(100), 0.0);
        assert_eq!(beta_schedule(250), 0.0);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        // logits strongly favoring the true class
        let logits = ndarray::arr2(&[[60.0f64, 0.0, 0.0], [0.0, 60.0, 0.0]]);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 1]);
        assert!(loss.abs() < 1e-12);
        // uniform logits: loss = ln(n_a)
        let logits = ndarray::arr2(&[[0.0f64, 0.0, 0.0]]);
        let (loss, _) = cross_entropy_loss(&logits, &[2]);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_everything_gives_zero_total_loss() {
        let l_ap_b = 0.0;
        let l_ap = 0.0;
        let (l1, l2) = sparsity_losses(&arr1(&[0.3f64, 0.7]), &arr1(&[0.3, 0.7]), 2);
        let beta = beta_schedule(0);
        let total = l_ap_b + l_ap + beta * l1 + (1.0 - beta) * l2;
        assert_eq!(total, 0.0);
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(&mut rng, crate::nn::encoder::Downsample::BlurPool);
        let model = CtrModel::new(&mut rng, enc, 8);
        let states = Array4::zeros((1, 4, 84, 84));
        assert!(model.attention(&states, &arr1(&[1.5f32])).is_err());
        assert!(model.attention(&states, &arr1(&[-0.1f32])).is_err());
        assert!(model.attention(&states, &arr1(&[0.5f32])).is_ok());
    }
}
