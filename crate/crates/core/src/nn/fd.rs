//! Central finite-difference checks for analytic gradients.

use super::Float;

/// Central difference of a scalar function along one coordinate.
pub fn central_diff<F: Float>(
    f: &mut dyn FnMut(&[F]) -> F,
    point: &mut Vec<F>,
    idx: usize,
    h: F,
) -> F {
    let orig = point[idx];
    point[idx] = orig + h;
    let up = f(point);
    point[idx] = orig - h;
    let dn = f(point);
    point[idx] = orig;
    (up - dn) / (h + h)
}

/// Compares an analytic gradient against central differences at `probes`
/// randomly chosen coordinates and returns the worst relative error,
/// `|fd - an| / max(scale, |fd|, |an|)`.
pub fn max_rel_error<F: Float>(
    f: &mut dyn FnMut(&[F]) -> F,
    point: &[F],
    analytic: &[F],
    probe_idx: &[usize],
    h: F,
    scale: F,
) -> F {
    assert_eq!(point.len(), analytic.len());
    let mut pt = point.to_vec();
    let mut worst = F::zero();
    for &i in probe_idx {
        let fd = central_diff(f, &mut pt, i, h);
        let denom = scale.max(fd.abs()).max(analytic[i].abs());
        let rel = (fd - analytic[i]).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Deterministically spreads `n` probe indices over a parameter vector.
pub fn spread_probes(len: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..len)).collect()
}
