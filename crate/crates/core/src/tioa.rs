//! Temporally-integrated overt attention: recency-weighted gaze targets and
//! the network trained to predict them.
//!
//! Target construction walks four steps: (1) merge near-duplicate gaze
//! points, (2) weight the merged points by recency, (3) blur into a focal
//! distribution, (4) reduce to the 21x21 feature resolution with fixed
//! all-ones kernels mirroring the encoder stages, then normalize to unit
//! mass.

use crate::data::{GazeSample, Transition, MAX_TRAIL};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::encoder::Encoder;
use crate::nn::head::{ContextHead, MapActivation};
use crate::nn::{c, Float, FRAME_SIZE, GRID, N_CELLS};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Seconds of gaze history integrated into a target.
pub const TAU_WINDOW: f64 = 2.95;
/// Decay constant of the recency weighting.
pub const WEIGHT_C: f64 = -2.95;
/// Merge radius for near-duplicate gaze points, in source pixels.
pub const MERGE_RADIUS_PX: f64 = 6.0;

/// Recency weight `w(tau) = 1.1 - 10^(tau/c - 1)` for a time lag
/// `tau <= 0` seconds; `w(0) = 1` and `w(-2.95) = 0.1`.
pub fn weight(tau: f64) -> Result<f64> {
    if tau > 0.0 {
        return Err(Error::config(format!("time lag must be <= 0, got {tau}")));
    }
    if tau < -TAU_WINDOW {
        return Err(Error::config(format!(
            "time lag {tau} is older than the {TAU_WINDOW} s window"
        )));
    }
    Ok(1.1 - 10f64.powf(tau / WEIGHT_C - 1.0))
}

/// A merged gaze cluster, represented by its most recent member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeCluster {
    pub x: f32,
    pub y: f32,
    pub t: f64,
}

/// Step 1: trims the trail to the most recent 60 samples and the 2.95 s
/// window, then merges points chronologically: each sample joins the nearest
/// existing cluster within 6 px (ties to the older cluster) and becomes its
/// representative, otherwise it opens a new cluster.
pub fn merge_gaze_points(trail: &[GazeSample]) -> Vec<GazeCluster> {
    let recent = &trail[trail.len().saturating_sub(MAX_TRAIL)..];
    let Some(last) = recent.last() else {
        return Vec::new();
    };
    let t_now = last.t;
    let mut clusters: Vec<GazeCluster> = Vec::new();
    for s in recent {
        if s.t - t_now < -TAU_WINDOW {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, cl) in clusters.iter().enumerate() {
            let d = ((s.x - cl.x) as f64).hypot((s.y - cl.y) as f64);
            if d <= MERGE_RADIUS_PX && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => {
                clusters[i] = GazeCluster {
                    x: s.x,
                    y: s.y,
                    t: s.t,
                };
            }
            None => clusters.push(GazeCluster {
                x: s.x,
                y: s.y,
                t: s.t,
            }),
        }
    }
    clusters
}

/// All-ones 3x3 convolution with padding 1 and the given stride.
fn ones_conv(x: &Array2<f64>, stride: usize) -> Array2<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let mut y = Array2::zeros((oh, ow));
    for r in 0..oh {
        for cc in 0..ow {
            let mut acc = 0.0;
            for kh in 0..3 {
                let ih = (r * stride + kh) as isize - 1;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kw in 0..3 {
                    let iw = (cc * stride + kw) as isize - 1;
                    if iw >= 0 && iw < w as isize {
                        acc += x[[ih as usize, iw as usize]];
                    }
                }
            }
            y[[r, cc]] = acc;
        }
    }
    y
}

/// Builds the normalized 21x21 gaze target for one trail.
///
/// Gaze coordinates live in `source_size` pixels; the Gaussian standard
/// deviation is one visual degree (`px_per_degree`, per axis), both scaled
/// into 84x84 frame space before evaluation.
pub fn build_target(
    trail: &[GazeSample],
    source_size: (u32, u32),
    px_per_degree: (f32, f32),
) -> Result<Array2<f32>> {
    if trail.is_empty() {
        return Err(Error::data("cannot build a gaze target from an empty trail"));
    }
    if px_per_degree.0 <= 0.0 || px_per_degree.1 <= 0.0 {
        return Err(Error::config("px_per_degree must be positive"));
    }
    let clusters = merge_gaze_points(trail);
    let t_now = trail.last().unwrap().t;
    let sx = FRAME_SIZE as f64 / source_size.0 as f64;
    let sy = FRAME_SIZE as f64 / source_size.1 as f64;
    let sig_x = px_per_degree.0 as f64 * sx;
    let sig_y = px_per_degree.1 as f64 * sy;

    // steps 2 + 3: weighted point set blurred onto the 84x84 grid
    let mut dense = Array2::<f64>::zeros((FRAME_SIZE, FRAME_SIZE));
    let mut ex = [0.0f64; FRAME_SIZE];
    let mut ey = [0.0f64; FRAME_SIZE];
    for cl in &clusters {
        let w = weight(cl.t - t_now)?;
        let px = cl.x as f64 * sx;
        let py = cl.y as f64 * sy;
        for (i, e) in ex.iter_mut().enumerate() {
            let d = i as f64 + 0.5 - px;
            *e = (-d * d / (2.0 * sig_x * sig_x)).exp();
        }
        for (i, e) in ey.iter_mut().enumerate() {
            let d = i as f64 + 0.5 - py;
            *e = (-d * d / (2.0 * sig_y * sig_y)).exp();
        }
        for r in 0..FRAME_SIZE {
            let wy = w * ey[r];
            for cc in 0..FRAME_SIZE {
                dense[[r, cc]] += wy * ex[cc];
            }
        }
    }

    // step 4: encoder-shaped reduction, strides 2, 2, 1
    let reduced = ones_conv(&ones_conv(&ones_conv(&dense, 2), 2), 1);
    debug_assert_eq!(reduced.shape(), [GRID, GRID]);
    let total: f64 = reduced.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::numeric("gaze target has no mass"));
    }
    Ok(reduced.mapv(|v| (v / total) as f32))
}

/// Floors a probability map at `1e-8` and renormalizes. Applied to targets
/// before the divergence loss so no cell divides by zero.
pub fn floor_and_renormalize(map: &Array2<f32>) -> Array2<f32> {
    let floored = map.mapv(|v| v.max(1e-8));
    let s = floored.sum();
    floored.mapv(|v| v / s)
}

/// Binarizes a probability map by keeping the `r` fraction of cells with the
/// largest values (exactly `round(r * 441)` cells, ties broken by row-major
/// index).
pub fn binarize_gaze(map: &Array2<f32>, r: f64) -> Result<Array2<f32>> {
    if !(0.0..=1.0).contains(&r) || r == 0.0 {
        return Err(Error::config(format!("rate must lie in (0, 1], got {r}")));
    }
    let n = map.len();
    let k = (r * n as f64).round() as usize;
    let flat = map.as_slice().expect("contiguous map");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        flat[b]
            .partial_cmp(&flat[a])
            .expect("finite map values")
            .then(a.cmp(&b))
    });
    let mut out = Array2::zeros(map.raw_dim());
    let out_flat = out.as_slice_mut().expect("contiguous");
    for &i in idx.iter().take(k) {
        out_flat[i] = 1.0;
    }
    Ok(out)
}

/// Versioned cache of per-transition gaze targets.
pub mod cache {
    use super::*;
    use std::io::{Read, Write};
    use std::path::Path;

    pub const TAG: &str = "gaze-target-cache/1";

    pub fn save(path: &Path, maps: &[Array2<f32>]) -> Result<()> {
        let header = serde_json::json!({
            "format": TAG,
            "count": maps.len(),
            "grid": GRID,
        })
        .to_string();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        for m in maps {
            for &v in m.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<Array2<f32>>> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut len4 = [0u8; 4];
        f.read_exact(&mut len4)?;
        let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
        f.read_exact(&mut header)?;
        let header: serde_json::Value = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("cache header: {e}")))?;
        if header["format"] != TAG {
            return Err(Error::Format("unsupported gaze cache format".into()));
        }
        let count = header["count"].as_u64().unwrap_or(0) as usize;
        let mut maps = Vec::with_capacity(count);
        let mut buf = vec![0u8; N_CELLS * 4];
        for _ in 0..count {
            f.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            maps.push(Array2::from_shape_vec((GRID, GRID), vals).expect("shape"));
        }
        Ok(maps)
    }
}

/// The gaze prediction network: shared encoder plus a softmax context head
/// (no sparsity input).
#[derive(Clone)]
pub struct TioaModel<F> {
    pub encoder: Encoder<F>,
    pub head: ContextHead<F>,
}

impl<F: Float> TioaModel<F> {
    pub fn new(rng: &mut ChaCha20Rng, encoder: Encoder<F>, pw_width: usize) -> Self {
        TioaModel {
            encoder,
            head: ContextHead::new(rng, pw_width, false, MapActivation::Softmax),
        }
    }

    /// Predicted probability maps `(N, 1, 21, 21)`, each summing to one.
    pub fn predict(&self, states: &Array4<F>) -> Array4<F> {
        let (feat, _) = self.encoder.forward(states);
        self.head.forward(&feat, None).0
    }

    /// Prediction from precomputed features.
    pub fn predict_from_features(&self, feat: &Array4<F>) -> Array4<F> {
        self.head.forward(feat, None).0
    }
}

/// Which way the divergence is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `sum q * log(q / t)` with `q` the prediction (the trained form).
    PredictionLeading,
    /// `sum t * log(t / q)` (conventional form, exposed for comparison).
    TargetLeading,
}

/// Mean divergence over a batch; `pred` and `target` are `(N, 441)` rows.
pub fn kl_loss<F: Float>(
    pred: &ndarray::Array2<F>,
    target: &ndarray::Array2<F>,
    direction: KlDirection,
) -> F {
    let n = pred.shape()[0];
    let mut total = F::zero();
    for (q, t) in pred.rows().into_iter().zip(target.rows()) {
        for (&qi, &ti) in q.iter().zip(t.iter()) {
            match direction {
                KlDirection::PredictionLeading => {
                    if qi > F::zero() {
                        total += qi * (qi / ti).ln();
                    }
                }
                KlDirection::TargetLeading => {
                    if ti > F::zero() {
                        total += ti * (ti / qi).ln();
                    }
                }
            }
        }
    }
    total / c::<F>(n as f64)
}

/// Gradient of [`kl_loss`] w.r.t. the prediction.
pub fn kl_loss_grad<F: Float>(
    pred: &ndarray::Array2<F>,
    target: &ndarray::Array2<F>,
    direction: KlDirection,
) -> ndarray::Array2<F> {
    let n = c::<F>(pred.shape()[0] as f64);
    let mut g = ndarray::Array2::zeros(pred.raw_dim());
    for ((gr, q), t) in g
        .rows_mut()
        .into_iter()
        .zip(pred.rows())
        .zip(target.rows())
    {
        for ((gi, &qi), &ti) in gr.into_iter().zip(q.iter()).zip(t.iter()) {
            *gi = match direction {
                KlDirection::PredictionLeading => ((qi / ti).ln() + F::one()) / n,
                KlDirection::TargetLeading => -(ti / qi) / n,
            };
        }
    }
    g
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TioaTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub kl_direction: KlDirection,
    pub pw_width: usize,
    pub px_per_degree: (f32, f32),
}

impl Default for TioaTrainConfig {
    fn default() -> Self {
        TioaTrainConfig {
            epochs: 150,
            learning_rate: 5e-4,
            batch_size: 32,
            freeze_encoder: true,
            kl_direction: KlDirection::PredictionLeading,
            pw_width: 32,
            px_per_degree: (4.0, 4.0),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TioaEpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trains the gaze predictor on transitions with nonempty trails.
///
/// Targets may be passed in from a cache; otherwise they are built here.
/// Transitions without gaze are skipped. Errors if no usable gaze exists.
pub fn train_tioa(
    train: &[&Transition],
    val: &[&Transition],
    ae_encoder: &Encoder<f32>,
    cfg: &TioaTrainConfig,
    seed: u64,
) -> Result<(TioaModel<f32>, Vec<TioaEpochReport>)> {
    let usable = |set: &[&Transition]| -> Vec<usize> {
        (0..set.len())
            .filter(|&i| !set[i].gaze_trail.is_empty())
            .collect()
    };
    let train_idx = usable(train);
    let val_idx = usable(val);
    if train_idx.is_empty() {
        return Err(Error::data(
            "no transitions with gaze trails; cannot train the gaze predictor",
        ));
    }

    let build_set = |set: &[&Transition], idx: &[usize]| -> Result<(Array4<f32>, Array2<f32>)> {
        let states: Vec<&crate::data::State> = idx.iter().map(|&i| &set[i].state).collect();
        let batch = crate::data::states_to_batch(&states);
        let mut targets = Array2::zeros((idx.len(), N_CELLS));
        for (row, &i) in idx.iter().enumerate() {
            let t = &set[i];
            let src = t.state.frames[0].source_size;
            let map = floor_and_renormalize(&build_target(
                &t.gaze_trail,
                src,
                cfg.px_per_degree,
            )?);
            for (k, &v) in map.iter().enumerate() {
                targets[[row, k]] = v;
            }
        }
        Ok((batch, targets))
    };
    let (train_states, train_targets) = build_set(train, &train_idx)?;
    let (val_states, val_targets) = build_set(val, &val_idx)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model = TioaModel::new(&mut rng, ae_encoder.clone(), cfg.pw_width);
    let frozen_train_feat = cfg
        .freeze_encoder
        .then(|| model.encoder.forward(&train_states).0);

    let mut opt = Adam::new(cfg.learning_rate);
    let n = train_idx.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (feat, enc_cache) = match &frozen_train_feat {
                Some(cached) => (gather4(cached, chunk), None),
                None => {
                    let states = gather4(&train_states, chunk);
                    let (feat, cache) = model.encoder.forward(&states);
                    (feat, Some(cache))
                }
            };
            let target = gather2(&train_targets, chunk);
            let (map, head_cache) = model.head.forward(&feat, None);
            let pred = map
                .into_shape_with_order((chunk.len(), N_CELLS))
                .expect("flatten");
            let loss = kl_loss(&pred, &target, cfg.kl_direction);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "gaze predictor loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += loss as f64;
            batches += 1;
            let dmap = kl_loss_grad(&pred, &target, cfg.kl_direction)
                .into_shape_with_order((chunk.len(), 1, GRID, GRID))
                .expect("unflatten");
            let mut grads = model.head.zero_grads();
            let (dfeat, _) =
                model
                    .head
                    .backward(&head_cache, &dmap, &mut grads, enc_cache.is_some());
            opt.begin_step();
            if let Some(enc_cache) = &enc_cache {
                let mut enc_grads = model.encoder.zero_grads();
                model
                    .encoder
                    .backward(enc_cache, &dfeat.expect("dfeat"), &mut enc_grads);
                model.encoder.apply_grads(&enc_grads, &mut opt);
            }
            model.head.apply_grads(&grads, &mut opt);
        }
        let val_loss = if val_idx.is_empty() {
            f64::NAN
        } else {
            let pred = model
                .predict(&val_states)
                .into_shape_with_order((val_idx.len(), N_CELLS))
                .expect("flatten");
            kl_loss(&pred, &val_targets, cfg.kl_direction) as f64
        };
        reports.push(TioaEpochReport {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
        });
    }
    Ok((model, reports))
}

fn gather4(src: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let mut out = Array4::zeros((idx.len(), src.shape()[1], src.shape()[2], src.shape()[3]));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&src.index_axis(ndarray::Axis(0), i));
    }
    out
}

fn gather2(src: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), src.shape()[1]));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&src.row(i));
    }
    out
}

/// Divergence of the uniform predictor against the given targets; the
/// baseline a trained predictor must beat.
pub fn uniform_predictor_loss(targets: &Array2<f32>, direction: KlDirection) -> f64 {
    let uniform = Array2::from_elem(targets.raw_dim(), 1.0f32 / N_CELLS as f32);
    kl_loss(&uniform, targets, direction) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_endpoints_and_midpoint() {
        assert!((weight(0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((weight(-2.95).unwrap() - 0.1).abs() < 1e-12);
        let mid = weight(-1.475).unwrap();
        assert!((mid - (1.1 - 10f64.powf(-0.5))).abs() < 1e-12);
        assert!((mid - 0.78377).abs() < 1e-5);
        assert!(weight(0.1).is_err());
        assert!(weight(-3.0).is_err());
    }

    #[test]
    fn weight_is_increasing_in_tau() {
        let mut prev = 0.0;
        for k in 0..=59 {
            let tau = -TAU_WINDOW + k as f64 * (TAU_WINDOW / 59.0);
            let w = weight(tau).unwrap();
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn single_center_point_peaks_at_center_cell() {
        let trail = vec![GazeSample {
            x: 42.0,
            y: 42.0,
            t: 0.0,
        }];
        let map = build_target(&trail, (84, 84), (4.0, 4.0)).unwrap();
        assert!((map.sum() - 1.0).abs() < 1e-6);
        let (mut best, mut arg) = (f32::MIN, (0, 0));
        for r in 0..GRID {
            for c in 0..GRID {
                if map[[r, c]] > best {
                    best = map[[r, c]];
                    arg = (r, c);
                }
            }
        }
        assert_eq!(arg, (10, 10));
    }

    #[test]
    fn duplicate_points_merge_to_one_cluster() {
        let one = vec![GazeSample {
            x: 30.0,
            y: 50.0,
            t: 0.05,
        }];
        let two = vec![
            GazeSample {
                x: 30.0,
                y: 50.0,
                t: 0.0,
            },
            GazeSample {
                x: 30.0,
                y: 50.0,
                t: 0.05,
            },
        ];
        assert_eq!(merge_gaze_points(&two).len(), 1);
        let m1 = build_target(&one, (84, 84), (4.0, 4.0)).unwrap();
        let m2 = build_target(&two, (84, 84), (4.0, 4.0)).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_trail_is_an_error() {
        assert!(build_target(&[], (84, 84), (4.0, 4.0)).is_err());
    }

    #[test]
    fn binarize_counts_and_tiebreak() {
        let uniform = Array2::from_elem((GRID, GRID), 1.0f32 / 441.0);
        let all = binarize_gaze(&uniform, 1.0).unwrap();
        assert_eq!(all.iter().filter(|&&v| v == 1.0).count(), 441);
        let b = binarize_gaze(&uniform, 0.16).unwrap();
        assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 71);
        // uniform map: ties broken by row-major index, so the first 71 cells
        let flat = b.as_slice().unwrap();
        for (i, &v) in flat.iter().enumerate() {
            assert_eq!(v, if i < 71 { 1.0 } else { 0.0 });
        }
        assert!(binarize_gaze(&uniform, 0.0).is_err());
    }

    #[test]
    fn translation_covariance_one_stride_step() {
        // one encoder-stride step is 4 px in frame space
        let base = vec![GazeSample {
            x: 38.0,
            y: 42.0,
            t: 0.0,
        }];
        let shifted = vec![GazeSample {
            x: 42.0,
            y: 42.0,
            t: 0.0,
        }];
        let argmax = |m: &Array2<f32>| {
            let mut best = (0, 0);
            for r in 0..GRID {
                for c in 0..GRID {
                    if m[[r, c]] > m[[best.0, best.1]] {
                        best = (r, c);
                    }
                }
            }
            best
        };
        let a = argmax(&build_target(&base, (84, 84), (4.0, 4.0)).unwrap());
        let b = argmax(&build_target(&shifted, (84, 84), (4.0, 4.0)).unwrap());
        assert_eq!((a.0, a.1 + 1), b);
    }

    #[test]
    fn recency_weighting_favors_recent_cluster() {
        // two isolated clusters far apart; the recent one carries more mass
        let trail = vec![
            GazeSample {
                x: 20.0,
                y: 20.0,
                t: 0.0,
            },
            GazeSample {
                x: 64.0,
                y: 64.0,
                t: 2.0,
            },
        ];
        let map = build_target(&trail, (84, 84), (4.0, 4.0)).unwrap();
        let old_mass = map[[5, 5]];
        let new_mass = map[[16, 16]];
        assert!(new_mass > old_mass);
    }

    #[test]
    fn cache_roundtrip() {
        let maps: Vec<Array2<f32>> = (0..3)
            .map(|k| {
                let trail = vec![GazeSample {
                    x: 10.0 + 20.0 * k as f32,
                    y: 40.0,
                    t: 0.0,
                }];
                build_target(&trail, (84, 84), (4.0, 4.0)).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.bin");
        cache::save(&path, &maps).unwrap();
        let back = cache::load(&path).unwrap();
        assert_eq!(maps.len(), back.len());
        for (a, b) in maps.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn kl_identity_is_zero_and_grad_matches_fd() {
        let t = {
            let mut t = Array2::from_elem((1, N_CELLS), 1.0f64);
            t[[0, 3]] = 5.0;
            let s = t.sum();
            t.mapv(|v| v / s)
        };
        assert!(kl_loss(&t.mapv(|v| v), &t, KlDirection::PredictionLeading).abs() < 1e-12);

        // gradient against finite differences at a non-trivial prediction
        let mut q = Array2::from_elem((1, N_CELLS), 1.0f64);
        q[[0, 10]] = 3.0;
        let s = q.sum();
        let q = q.mapv(|v| v / s);
        for dir in [KlDirection::PredictionLeading, KlDirection::TargetLeading] {
            let g = kl_loss_grad(&q, &t, dir);
            let h = 1e-7;
            for &i in &[0usize, 10, 3] {
                let mut qp = q.clone();
                qp[[0, i]] += h;
                let up = kl_loss(&qp, &t, dir);
                qp[[0, i]] -= 2.0 * h;
                let dn = kl_loss(&qp, &t, dir);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[[0, i]]).abs() < 1e-5, "{dir:?} cell {i}");
            }
        }
    }
}
