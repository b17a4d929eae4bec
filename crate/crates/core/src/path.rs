//! Straight-line probability path between standard normal noise and code
//! embeddings, and the closed-form Bayes posterior over endpoints.
//!
//! Given a grid `c`, `z_t = t * embed(c) + (1 - t) * z_0` with `z_0 ~ N(0, I)`,
//! so `z_t | c ~ N(t * embed(c), (1 - t)^2 I)`. The posterior over `c` is then
//! exact whenever the data joint can be enumerated.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::codebook::{CodeGrid, Codebook, LatentPoint};
use crate::data::{DataSpec, ENUMERATION_LIMIT};
use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::scalar::Scalar;

/// Guard keeping `t` away from the `1 / (1 - t)` singularity.
pub const EPS_T: f64 = 1e-3;

/// Largest admissible time.
pub const T_MAX: f64 = 1.0 - EPS_T;

/// A time in `[0, 1 - EPS_T]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(TimePoint(t))
    }

    /// Uniform on `[0, 1 - EPS_T]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u: f64 = rng.random();
        TimePoint(u * T_MAX)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=T_MAX).contains(&t) {
        return Err(Error::TimeGuard { t, max: T_MAX });
    }
    Ok(())
}

pub fn sample_time(seed: u64) -> TimePoint {
    TimePoint::sample(&mut EngineRng::seed_from_u64(seed))
}

pub fn sample_prior_with<F: Scalar, R: Rng + ?Sized>(g: usize, e: usize, rng: &mut R) -> LatentPoint<F> {
    Array2::from_shape_simple_fn((g, e), || {
        let v: f64 = StandardNormal.sample(rng);
        F::lit(v)
    })
}

/// I.i.d. standard normal `G x E` array.
pub fn sample_prior<F: Scalar>(g: usize, e: usize, seed: u64) -> LatentPoint<F> {
    sample_prior_with(g, e, &mut EngineRng::seed_from_u64(seed))
}

/// `t * z1 + (1 - t) * z0`.
pub fn interpolate<F: Scalar>(z0: &LatentPoint<F>, z1: &LatentPoint<F>, t: F) -> Result<LatentPoint<F>> {
    if z0.dim() != z1.dim() {
        return Err(Error::shape(format!("z0 {:?} vs z1 {:?}", z0.dim(), z1.dim())));
    }
    let s = F::one() - t;
    Ok(ndarray::Zip::from(z0).and(z1).map_collect(|&a, &b| t * b + s * a))
}

/// Velocity of the straight line toward `z1`: `(z1 - zt) / (1 - t)`.
pub fn conditional_velocity<F: Scalar>(zt: &LatentPoint<F>, z1: &LatentPoint<F>, t: F) -> Result<Array2<F>> {
    check_time(t.as_f64())?;
    if zt.dim() != z1.dim() {
        return Err(Error::shape(format!("zt {:?} vs z1 {:?}", zt.dim(), z1.dim())));
    }
    let inv = F::one() / (F::one() - t);
    Ok(ndarray::Zip::from(zt).and(z1).map_collect(|&a, &b| (b - a) * inv))
}

#[derive(Debug, Clone)]
enum OracleKind {
    /// Independent positions: per-position log prior `G x K`.
    Factorized { log_prior: Vec<Vec<f64>> },
    /// Log joint over `[K]^G`.
    Enumerated { log_joint: Vec<f64> },
}

/// Exact posterior `p(c | z_t)` for a data spec and frozen codebook.
#[derive(Debug, Clone)]
pub struct OraclePosterior {
    cb: Codebook<f64>,
    g: usize,
    kind: OracleKind,
}

impl OraclePosterior {
    /// Factorized for independent data (any size), enumerated otherwise.
    pub fn new(spec: &DataSpec, cb: &Codebook<f64>) -> Result<Self> {
        if spec.k() != cb.k() {
            return Err(Error::shape(format!("data has K={}, codebook K={}", spec.k(), cb.k())));
        }
        let kind = match spec {
            DataSpec::Independent { probs } => {
                OracleKind::Factorized { log_prior: probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect() }
            }
            _ => OracleKind::Enumerated { log_joint: spec.exact_joint()?.iter().map(|p| p.ln()).collect() },
        };
        Ok(OraclePosterior { cb: cb.clone(), g: spec.g(), kind })
    }

    /// Enumerated oracle from an explicit joint table.
    pub fn from_joint(joint: &[f64], g: usize, cb: &Codebook<f64>) -> Result<Self> {
        let cells = (cb.k() as u128).saturating_pow(g as u32);
        if cells > ENUMERATION_LIMIT as u128 {
            return Err(Error::EnumerationGuard { cells, limit: ENUMERATION_LIMIT });
        }
        if joint.len() as u128 != cells {
            return Err(Error::shape(format!("joint has {} cells, expected {cells}", joint.len())));
        }
        Ok(OraclePosterior {
            cb: cb.clone(),
            g,
            kind: OracleKind::Enumerated { log_joint: joint.iter().map(|p| p.ln()).collect() },
        })
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self.kind, OracleKind::Factorized { .. })
    }

    pub fn codebook(&self) -> &Codebook<f64> {
        &self.cb
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn k(&self) -> usize {
        self.cb.k()
    }

    /// Gaussian log-likelihood `-|z_g - t e_k|^2 / (2 (1 - t)^2)` for every (g, k).
    fn log_likelihood(&self, zt: &LatentPoint<f64>, t: f64) -> Array2<f64> {
        let denom = 2.0 * (1.0 - t) * (1.0 - t);
        Array2::from_shape_fn((self.g, self.k()), |(g, k)| {
            let d: f64 = zt.row(g).iter().zip(self.cb.row(k)).map(|(&z, &e)| (z - t * e).powi(2)).sum();
            -d / denom
        })
    }

    fn check(&self, zt: &LatentPoint<f64>, t: f64) -> Result<()> {
        check_time(t)?;
        if zt.dim() != (self.g, self.cb.e()) {
            return Err(Error::shape(format!("zt {:?}, expected ({}, {})", zt.dim(), self.g, self.cb.e())));
        }
        if zt.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("zt passed to oracle".into()));
        }
        Ok(())
    }

    /// Per-position marginals of `p(c | z_t)`, `G x K`.
    pub fn bayes_posterior(&self, zt: &LatentPoint<f64>, t: f64) -> Result<Array2<f64>> {
        self.check(zt, t)?;
        let ll = self.log_likelihood(zt, t);
        let (g_n, k_n) = (self.g, self.k());
        let mut out = Array2::zeros((g_n, k_n));
        match &self.kind {
            OracleKind::Factorized { log_prior } => {
                for g in 0..g_n {
                    let logits: Vec<f64> = (0..k_n).map(|k| log_prior[g][k] + ll[[g, k]]).collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for k in 0..k_n {
                        out[[g, k]] = w[k] / z;
                    }
                }
            }
            OracleKind::Enumerated { log_joint } => {
                let mut lw = Vec::with_capacity(log_joint.len());
                let mut codes = vec![0usize; g_n];
                for (cell, &lp) in log_joint.iter().enumerate() {
                    if lp == f64::NEG_INFINITY {
                        lw.push(f64::NEG_INFINITY);
                        continue;
                    }
                    decode_into(cell, k_n, &mut codes);
                    lw.push(lp + codes.iter().enumerate().map(|(g, &c)| ll[[g, c]]).sum::<f64>());
                }
                let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (cell, &l) in lw.iter().enumerate() {
                    if l == f64::NEG_INFINITY {
                        continue;
                    }
                    let w = (l - m).exp();
                    total += w;
                    decode_into(cell, k_n, &mut codes);
                    for (g, &c) in codes.iter().enumerate() {
                        out[[g, c]] += w;
                    }
                }
                out.mapv_inplace(|x| x / total);
            }
        }
        Ok(out)
    }

    /// `sum_k p(c_g = k | z_t) (e_k - z_{t,g}) / (1 - t)` per position.
    pub fn marginal_velocity(&self, zt: &LatentPoint<f64>, t: f64) -> Result<Array2<f64>> {
        let post = self.bayes_posterior(zt, t)?;
        let inv = 1.0 / (1.0 - t);
        let mut v = Array2::zeros(zt.dim());
        for g in 0..self.g {
            for k in 0..self.k() {
                let p = post[[g, k]];
                for (vd, (&e, &z)) in v.row_mut(g).iter_mut().zip(self.cb.row(k).iter().zip(zt.row(g))) {
                    *vd += p * (e - z) * inv;
                }
            }
        }
        Ok(v)
    }

    /// Posterior-mean embedding `mu*` per position.
    pub fn posterior_mean(&self, zt: &LatentPoint<f64>, t: f64) -> Result<Array2<f64>> {
        Ok(self.bayes_posterior(zt, t)?.dot(self.cb.embeddings()))
    }
}

fn decode_into(mut cell: usize, k: usize, codes: &mut [usize]) {
    for slot in codes.iter_mut().rev() {
        *slot = cell % k;
        cell /= k;
    }
}

/// Draw `(c, z_t)` from the forward construction at time `t`.
pub fn forward_sample<R: Rng + ?Sized>(
    spec: &DataSpec,
    cb: &Codebook<f64>,
    t: f64,
    rng: &mut R,
) -> Result<(CodeGrid, LatentPoint<f64>)> {
    let c = spec.sample(rng);
    let z1 = cb.embed(&c)?;
    let z0 = sample_prior_with(spec.g(), cb.e(), rng);
    Ok((c, interpolate(&z0, &z1, t)?))
}

/// Dump posteriors as CSV rows `t,position,code,probability`.
pub fn write_posterior_csv<W: Write>(mut w: W, rows: &[(f64, Array2<f64>)]) -> Result<()> {
    writeln!(w, "t,position,code,probability")?;
    for (t, post) in rows {
        for ((g, k), p) in post.indexed_iter() {
            writeln!(w, "{t},{g},{k},{p}")?;
        }
    }
    Ok(())
}
