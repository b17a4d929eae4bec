use rand::seq::index::sample;
use rand::SeedableRng;

use super::{Batch, LossKind, Model};
use crate::error::Result;
use crate::rng::EngineRng;

/// Minimum number of coordinates probed by [`grad_check`].
pub const GRAD_CHECK_COORDS: usize = 200;

/// Largest relative error between reverse-mode gradients and central finite
/// differences over `max(GRAD_CHECK_COORDS, n_coords)` random coordinates
/// (all of them when the model is smaller).
///
/// Relative error is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check(
    model: &Model<f64>,
    batch: &Batch<f64>,
    kind: LossKind,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = model.backward(batch, kind)?;
    let n = grads.len();
    let want = n_coords.max(GRAD_CHECK_COORDS).min(n);
    let mut rng = EngineRng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, n, want).into_vec();
    coords.sort_unstable();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe.params.values()[i];
        probe.params.values_mut()[i] = orig + epsilon;
        let up = probe.loss(batch, kind)?.total;
        probe.params.values_mut()[i] = orig - epsilon;
        let down = probe.loss(batch, kind)?.total;
        probe.params.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let rel = (grads[i] - fd).abs() / (grads[i].abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
