use ndarray::{Array2, ArrayView2};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest admissible softmax temperature.
pub const TAU_MIN: f64 = 1e-3;

/// Unnormalized per-position log-probabilities, `G x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLogits<F>(pub Array2<F>);

impl<F: Scalar> PosteriorLogits<F> {
    pub fn new(logits: Array2<F>) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(PosteriorLogits(logits))
    }

    pub fn view(&self) -> ArrayView2<'_, F> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Log-softmax at temperature 1.
    pub fn log_softmax(&self) -> Array2<F> {
        let mut out = self.0.clone();
        for mut row in out.outer_iter_mut() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        out
    }
}

/// Row-wise `exp(l / tau) / sum exp(l / tau)` with max subtraction.
/// Rows are independent: the distribution factorizes over positions.
pub fn softmax_temp<F: Scalar>(logits: &PosteriorLogits<F>, tau: F) -> Result<Array2<F>> {
    if !(tau.as_f64() >= TAU_MIN) {
        return Err(Error::Temperature { tau: tau.as_f64(), min: TAU_MIN });
    }
    let mut out = logits.0.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| ((x - m) / tau).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    Ok(out)
}

/// Row-normalization tolerance: 1e-6, widened to the rounding floor of `F`
/// for large `K`.
fn row_tolerance<F: Scalar>(k: usize) -> f64 {
    1e-6f64.max(4.0 * k as f64 * F::epsilon().as_f64())
}

/// Probability-weighted sum of codebook rows per position, `G x E`.
pub fn posterior_mean<F: Scalar>(probs: &Array2<F>, cb: &Codebook<F>) -> Result<Array2<F>> {
    if probs.ncols() != cb.k() {
        return Err(Error::shape(format!("{} probability columns for K={}", probs.ncols(), cb.k())));
    }
    let tol = row_tolerance::<F>(cb.k());
    for (g, row) in probs.outer_iter().enumerate() {
        let s = row.sum().as_f64();
        if (s - 1.0).abs() > tol || row.iter().any(|&p| p < F::zero()) {
            return Err(Error::Normalization(format!("row {g} sums to {s}")));
        }
    }
    Ok(probs.dot(cb.embeddings()))
}
