//! Seeded randomness. Every component draws from a labeled substream of one
//! top-level seed so components can be varied independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type EngineRng = ChaCha8Rng;

/// Substream for `label` derived from `seed`.
pub fn substream(seed: u64, label: &str) -> EngineRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    EngineRng::from_seed(key)
}

/// Counter-based per-item stream: independent of how items are batched.
pub fn item_stream(seed: u64, label: &str, index: u64) -> EngineRng {
    let mut rng = substream(seed, label);
    rng.set_stream(index);
    rng
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass when rounding leaves `u` past the cumulative sum.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
