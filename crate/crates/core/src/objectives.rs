//! Training losses for the three methods and the DFM corruption process.
//!
//! Each loss also has a `*_grad` form returning the gradient with respect to
//! the network head output; the model's reverse pass chains from there.
//! Loss arithmetic runs in `f64` regardless of the model scalar.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};

use crate::codebook::{CodeGrid, LatentPoint};
use crate::error::{Error, Result};
use crate::model::PosteriorLogits;
use crate::path::{conditional_velocity, interpolate, TimePoint};
use crate::rng::EngineRng;
use crate::scalar::Scalar;

/// z-loss coefficient applied by default to the categorical objective.
pub const DEFAULT_Z_COEFF: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub primary: f64,
    /// Weighted z-loss contribution (0 when absent).
    pub z_term: f64,
    /// Unweighted mean of `(log Z)^2` over positions; 0 for velocity heads.
    pub log_z_sq: f64,
    /// Loss at each grid position. Masked-out DFM positions report 0.
    pub per_position: Vec<f64>,
}

impl LossReport {
    /// Entrywise mean of several reports (batch reduction, fixed order).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len() as f64;
        let g = reports.first().map_or(0, |r| r.per_position.len());
        let mut out = LossReport { per_position: vec![0.0; g], ..Default::default() };
        for r in reports {
            out.total += r.total / n;
            out.primary += r.primary / n;
            out.z_term += r.z_term / n;
            out.log_z_sq += r.log_z_sq / n;
            for (o, p) in out.per_position.iter_mut().zip(&r.per_position) {
                *o += p / n;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.primary.is_finite() && self.z_term.is_finite()
    }
}

/// Log-sum-exp and softmax of one logit row.
fn lse_softmax(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    (m + s.ln(), w.into_iter().map(|x| x / s).collect())
}

fn check_logits<F: Scalar>(logits: &ArrayView2<'_, F>, target: &CodeGrid) -> Result<()> {
    if logits.nrows() != target.len() {
        return Err(Error::shape(format!("{} logit rows for a grid of {}", logits.nrows(), target.len())));
    }
    target.check(logits.ncols())?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Cross-entropy against the target codes plus `z_coeff * mean_g (log Z_g)^2`.
/// Training temperature is fixed at 1.
pub fn purr_loss<F: Scalar>(logits: &PosteriorLogits<F>, target: &CodeGrid, z_coeff: f64) -> Result<LossReport> {
    Ok(purr_loss_grad(logits.view(), target, z_coeff)?.0)
}

pub fn purr_loss_grad<F: Scalar>(
    logits: ArrayView2<'_, F>,
    target: &CodeGrid,
    z_coeff: f64,
) -> Result<(LossReport, Array2<F>)> {
    check_logits(&logits, target)?;
    let (g_n, k_n) = logits.dim();
    let inv_g = 1.0 / g_n as f64;
    let mut grad = Array2::zeros((g_n, k_n));
    let mut rep = LossReport { per_position: Vec::with_capacity(g_n), ..Default::default() };
    for (g, &y) in target.codes().iter().enumerate() {
        let row: Vec<f64> = logits.row(g).iter().map(|x| x.as_f64()).collect();
        let (lse, p) = lse_softmax(&row);
        let ce = lse - row[y];
        let z = z_coeff * lse * lse;
        rep.primary += ce * inv_g;
        rep.z_term += z * inv_g;
        rep.log_z_sq += lse * lse * inv_g;
        rep.per_position.push(ce + z);
        for k in 0..k_n {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad[[g, k]] = F::lit(inv_g * (p[k] - onehot + 2.0 * z_coeff * lse * p[k]));
        }
    }
    rep.total = rep.primary + rep.z_term;
    Ok((rep, grad))
}

/// Mean squared error against the conditional velocity of the line `z0 -> z1` at `t`.
pub fn cfm_loss<F: Scalar>(
    v_pred: &Array2<F>,
    z0: &LatentPoint<F>,
    z1: &LatentPoint<F>,
    t: F,
) -> Result<LossReport> {
    let zt = interpolate(z0, z1, t)?;
    let target = conditional_velocity(&zt, z1, t)?;
    Ok(velocity_mse_grad(v_pred.view(), target.view())?.0)
}

/// MSE averaged over all `G * E` entries, with its gradient.
pub fn velocity_mse_grad<F: Scalar>(
    v_pred: ArrayView2<'_, F>,
    target: ArrayView2<'_, F>,
) -> Result<(LossReport, Array2<F>)> {
    if v_pred.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", v_pred.dim(), target.dim())));
    }
    let (g_n, e_n) = v_pred.dim();
    let n = (g_n * e_n) as f64;
    let mut grad = Array2::zeros((g_n, e_n));
    let mut rep = LossReport { per_position: vec![0.0; g_n], ..Default::default() };
    for ((g, e), &v) in v_pred.indexed_iter() {
        let r = v.as_f64() - target[[g, e]].as_f64();
        rep.primary += r * r / n;
        rep.per_position[g] += r * r / e_n as f64;
        grad[[g, e]] = F::lit(2.0 * r / n);
    }
    rep.total = rep.primary;
    if !rep.total.is_finite() {
        return Err(Error::NonFinite("velocity loss".into()));
    }
    Ok((rep, grad))
}

/// A code grid in which some positions are replaced by the MASK token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedGrid(pub Vec<Option<usize>>);

impl MaskedGrid {
    pub fn all_masked(g: usize) -> Self {
        MaskedGrid(vec![None; g])
    }

    pub fn unmasked(grid: &CodeGrid) -> Self {
        MaskedGrid(grid.codes().iter().map(|&c| Some(c)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, g: usize) -> bool {
        self.0[g].is_none()
    }

    pub fn mask_flags(&self) -> Vec<bool> {
        self.0.iter().map(Option::is_none).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.0.iter().filter(|c| c.is_none()).count()
    }

    /// Token id in the `K + 1` vocabulary; MASK is `K`.
    pub fn token(&self, g: usize, k: usize) -> usize {
        self.0[g].unwrap_or(k)
    }

    /// The completed grid, if nothing is masked.
    pub fn to_grid(&self) -> Option<CodeGrid> {
        self.0.iter().copied().collect::<Option<Vec<_>>>().map(CodeGrid)
    }
}

/// Keep each code independently with probability `t`, else MASK.
pub fn dfm_corrupt_with<R: Rng + ?Sized>(target: &CodeGrid, t: TimePoint, rng: &mut R) -> MaskedGrid {
    let t = t.get();
    MaskedGrid(
        target
            .codes()
            .iter()
            .map(|&c| {
                let u: f64 = rng.random();
                (u < t).then_some(c)
            })
            .collect(),
    )
}

pub fn dfm_corrupt(target: &CodeGrid, t: TimePoint, seed: u64) -> MaskedGrid {
    dfm_corrupt_with(target, t, &mut EngineRng::seed_from_u64(seed))
}

/// Cross-entropy averaged over masked positions; 0 when nothing is masked.
pub fn dfm_loss<F: Scalar>(logits: &PosteriorLogits<F>, target: &CodeGrid, masked: &MaskedGrid) -> Result<LossReport> {
    Ok(dfm_loss_grad(logits.view(), target, masked)?.0)
}

pub fn dfm_loss_grad<F: Scalar>(
    logits: ArrayView2<'_, F>,
    target: &CodeGrid,
    masked: &MaskedGrid,
) -> Result<(LossReport, Array2<F>)> {
    check_logits(&logits, target)?;
    if masked.len() != target.len() {
        return Err(Error::shape("mask and target lengths differ"));
    }
    let (g_n, k_n) = logits.dim();
    let m = masked.num_masked();
    let mut grad = Array2::zeros((g_n, k_n));
    let mut rep = LossReport { per_position: vec![0.0; g_n], ..Default::default() };
    if m == 0 {
        return Ok((rep, grad));
    }
    let inv_m = 1.0 / m as f64;
    for (g, &y) in target.codes().iter().enumerate() {
        if !masked.is_masked(g) {
            continue;
        }
        let row: Vec<f64> = logits.row(g).iter().map(|x| x.as_f64()).collect();
        let (lse, p) = lse_softmax(&row);
        let ce = lse - row[y];
        rep.primary += ce * inv_m;
        rep.log_z_sq += lse * lse * inv_m;
        rep.per_position[g] = ce;
        for k in 0..k_n {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad[[g, k]] = F::lit(inv_m * (p[k] - onehot));
        }
    }
    rep.total = rep.primary;
    Ok((rep, grad))
}
