//! Generation. Continuous methods integrate a velocity field with fixed-step
//! Euler on `t = s / T` and quantize the end state; the discrete baseline
//! unmasks positions progressively.
//!
//! Samples are processed in fixed chunks, each sample drawing from its own
//! counter-based stream, so output does not depend on the thread count.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodeGrid, Codebook, LatentPoint};
use crate::error::{Error, Result};
use crate::model::{posterior_mean, softmax_temp, BatchInput, Head, Model, PosteriorLogits, TAU_MIN};
use crate::objectives::MaskedGrid;
use crate::path::{sample_prior_with, OraclePosterior, T_MAX};
use crate::rng::{item_stream, sample_categorical};
use crate::scalar::Scalar;

/// Samples integrated together in one batched forward pass.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSpace {
    /// Combine logits before the softmax.
    #[default]
    Logit,
    /// Combine the resulting velocities.
    Velocity,
}

fn d_steps() -> usize {
    100
}
fn d_tau() -> f64 {
    0.9
}
fn d_w() -> f64 {
    1.0
}
fn d_n() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_w")]
    pub guidance_weight: f64,
    /// Where guidance is applied for the categorical head. The velocity
    /// head always guides velocities and the token head always guides logits.
    #[serde(default)]
    pub guidance_space: GuidanceSpace,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default = "d_n")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: d_steps(),
            tau: d_tau(),
            guidance_weight: d_w(),
            guidance_space: GuidanceSpace::Logit,
            label: None,
            n_samples: d_n(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be >= 1".into()));
        }
        if !(self.tau >= TAU_MIN) {
            return Err(Error::Temperature { tau: self.tau, min: TAU_MIN });
        }
        if !(self.guidance_weight >= 0.0) {
            return Err(Error::Config("sampler: guidance_weight must be >= 0".into()));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.guidance_weight != 1.0
    }
}

/// A batched velocity field `v(z, t)`.
pub trait VelocityField<F: Scalar>: Sync {
    fn velocity(&self, z: &[LatentPoint<F>], t: F) -> Result<Vec<Array2<F>>>;
}

fn check_guidance<F>(model: &Model<F>, scfg: &SamplerConfig) -> Result<()> {
    if scfg.guided() && (scfg.label.is_none() || model.cfg.num_classes.is_none()) {
        return Err(Error::Guidance(format!(
            "guidance weight {} needs a label and a class-conditional model",
            scfg.guidance_weight
        )));
    }
    Ok(())
}

fn combine<F: Scalar>(null: &Array2<F>, cond: &Array2<F>, w: F) -> Array2<F> {
    null + &((cond - null) * w)
}

/// Barycentric velocity `(mu - z) / (1 - t)` from the categorical head, with
/// tempered probabilities and optional guidance.
pub struct PurrVelocity<'a, F> {
    model: &'a Model<F>,
    tau: F,
    w: F,
    label: Option<usize>,
    guided: bool,
    space: GuidanceSpace,
}

impl<'a, F: Scalar> PurrVelocity<'a, F> {
    pub fn new(model: &'a Model<F>, scfg: &SamplerConfig) -> Result<Self> {
        if model.cfg.head != Head::Categorical {
            return Err(Error::MethodMismatch { expected: "categorical head".into(), found: format!("{:?}", model.cfg.head) });
        }
        scfg.validate()?;
        check_guidance(model, scfg)?;
        Ok(PurrVelocity {
            model,
            tau: F::lit(scfg.tau),
            w: F::lit(scfg.guidance_weight),
            label: scfg.label,
            guided: scfg.guided(),
            space: scfg.guidance_space,
        })
    }

    fn logits(&self, z: &[LatentPoint<F>], t: F, label: Option<usize>) -> Result<Vec<Array2<F>>> {
        let input = BatchInput::Latent(z.to_vec());
        self.model.forward_grids(&input, &vec![t; z.len()], &vec![label; z.len()])
    }

    fn barycentric(&self, logits: Array2<F>, z: &LatentPoint<F>, t: F) -> Result<Array2<F>> {
        let probs = softmax_temp(&PosteriorLogits::new(logits)?, self.tau)?;
        let mu = posterior_mean(&probs, &self.model.codebook)?;
        Ok((mu - z) / (F::one() - t))
    }

    /// Tempered, guided per-position probabilities at `(z, t)`.
    pub fn probs(&self, z: &[LatentPoint<F>], t: F) -> Result<Vec<Array2<F>>> {
        let logits = self.guided_logits(z, t)?;
        logits.into_iter().map(|l| softmax_temp(&PosteriorLogits::new(l)?, self.tau)).collect()
    }

    fn guided_logits(&self, z: &[LatentPoint<F>], t: F) -> Result<Vec<Array2<F>>> {
        let cond = self.logits(z, t, self.label)?;
        if !self.guided {
            return Ok(cond);
        }
        let null = self.logits(z, t, None)?;
        Ok(null.iter().zip(&cond).map(|(n, c)| combine(n, c, self.w)).collect())
    }
}

impl<F: Scalar> VelocityField<F> for PurrVelocity<'_, F> {
    fn velocity(&self, z: &[LatentPoint<F>], t: F) -> Result<Vec<Array2<F>>> {
        if self.guided && self.space == GuidanceSpace::Velocity {
            let cond = self.logits(z, t, self.label)?;
            let null = self.logits(z, t, None)?;
            return z
                .iter()
                .zip(cond.into_iter().zip(null))
                .map(|(zi, (c, n))| {
                    let vc = self.barycentric(c, zi, t)?;
                    let vn = self.barycentric(n, zi, t)?;
                    Ok(combine(&vn, &vc, self.w))
                })
                .collect();
        }
        let logits = self.guided_logits(z, t)?;
        z.iter().zip(logits).map(|(zi, l)| self.barycentric(l, zi, t)).collect()
    }
}

/// The velocity head, with velocity-space guidance.
pub struct CfmVelocity<'a, F> {
    model: &'a Model<F>,
    w: F,
    label: Option<usize>,
    guided: bool,
}

impl<'a, F: Scalar> CfmVelocity<'a, F> {
    pub fn new(model: &'a Model<F>, scfg: &SamplerConfig) -> Result<Self> {
        if model.cfg.head != Head::Velocity {
            return Err(Error::MethodMismatch { expected: "velocity head".into(), found: format!("{:?}", model.cfg.head) });
        }
        scfg.validate()?;
        check_guidance(model, scfg)?;
        Ok(CfmVelocity { model, w: F::lit(scfg.guidance_weight), label: scfg.label, guided: scfg.guided() })
    }

    fn raw(&self, z: &[LatentPoint<F>], t: F, label: Option<usize>) -> Result<Vec<Array2<F>>> {
        let input = BatchInput::Latent(z.to_vec());
        self.model.forward_grids(&input, &vec![t; z.len()], &vec![label; z.len()])
    }
}

impl<F: Scalar> VelocityField<F> for CfmVelocity<'_, F> {
    fn velocity(&self, z: &[LatentPoint<F>], t: F) -> Result<Vec<Array2<F>>> {
        let cond = self.raw(z, t, self.label)?;
        if !self.guided {
            return Ok(cond);
        }
        let null = self.raw(z, t, None)?;
        Ok(null.iter().zip(&cond).map(|(n, c)| combine(n, c, self.w)).collect())
    }
}

/// The exact marginal velocity of the data distribution. Times beyond the
/// oracle's guard are clamped to it.
pub struct OracleVelocity<'a> {
    pub oracle: &'a OraclePosterior,
}

impl VelocityField<f64> for OracleVelocity<'_> {
    fn velocity(&self, z: &[LatentPoint<f64>], t: f64) -> Result<Vec<Array2<f64>>> {
        let t = t.min(T_MAX);
        z.iter().map(|zi| self.oracle.marginal_velocity(zi, t)).collect()
    }
}

/// Generated grids plus the pre-quantization end states.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<F> {
    pub codes: Vec<CodeGrid>,
    pub z_final: Vec<LatentPoint<F>>,
}

/// Fixed-step Euler from the Gaussian prior: `z <- z + v(z, s / T) / T`.
pub fn euler_sample<F: Scalar, V: VelocityField<F>>(
    field: &V,
    cb: &Codebook<F>,
    g: usize,
    scfg: &SamplerConfig,
) -> Result<SampleOutput<F>> {
    if scfg.steps == 0 {
        return Err(Error::Config("sampler: steps must be >= 1".into()));
    }
    let n = scfg.n_samples;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let chunks: Vec<Vec<LatentPoint<F>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut z: Vec<LatentPoint<F>> = (start..end)
                .map(|i| sample_prior_with(g, cb.e(), &mut item_stream(scfg.seed, "prior", i as u64)))
                .collect();
            integrate(field, &mut z, scfg.steps)?;
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let z_final: Vec<LatentPoint<F>> = chunks.into_iter().flatten().collect();
    let codes = z_final.iter().map(|z| cb.quantize(z)).collect::<Result<_>>()?;
    Ok(SampleOutput { codes, z_final })
}

/// Run the Euler loop in place on a batch of states.
pub fn integrate<F: Scalar, V: VelocityField<F>>(field: &V, z: &mut [LatentPoint<F>], steps: usize) -> Result<()> {
    let h = F::lit(1.0 / steps as f64);
    for s in 0..steps {
        let t = F::lit(s as f64 / steps as f64);
        let v = field.velocity(z, t)?;
        for (zi, vi) in z.iter_mut().zip(v) {
            zi.scaled_add(h, &vi);
            if zi.iter().any(|x| !x.is_finite()) {
                return Err(Error::SamplerDiverged { step: s, detail: "non-finite state".into() });
            }
        }
    }
    Ok(())
}

/// Progressive unmasking for the discrete-token head. A masked position
/// unmasks at step `s` with probability `(1 / T) / (1 - s / T)` and draws its
/// code from the tempered logits; anything still masked at the end is drawn
/// from the final logits.
pub fn dfm_sample<F: Scalar>(model: &Model<F>, scfg: &SamplerConfig) -> Result<Vec<CodeGrid>> {
    if model.cfg.head != Head::DiscreteToken {
        return Err(Error::MethodMismatch { expected: "discrete-token head".into(), found: format!("{:?}", model.cfg.head) });
    }
    scfg.validate()?;
    check_guidance(model, scfg)?;
    let n = scfg.n_samples;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let chunks: Vec<Vec<CodeGrid>> =
        starts.par_iter().map(|&start| dfm_chunk(model, scfg, start, (start + CHUNK).min(n))).collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn token_probs<F: Scalar>(model: &Model<F>, scfg: &SamplerConfig, grids: &[MaskedGrid], t: F) -> Result<Vec<Array2<F>>> {
    let input = BatchInput::Tokens(grids.to_vec());
    let ts = vec![t; grids.len()];
    let cond = model.forward_grids(&input, &ts, &vec![scfg.label; grids.len()])?;
    let logits = if scfg.guided() {
        let null = model.forward_grids(&input, &ts, &vec![None; grids.len()])?;
        null.iter().zip(&cond).map(|(n, c)| combine(n, c, F::lit(scfg.guidance_weight))).collect()
    } else {
        cond
    };
    logits.into_iter().map(|l| softmax_temp(&PosteriorLogits::new(l)?, F::lit(scfg.tau))).collect()
}

/// Chance that a still-masked position unmasks at step `s` of `steps`:
/// `h / (1 - t)` with `h = 1 / T`, `t = s / T`. Survival through the first
/// `m` steps telescopes to `1 - m / T`.
pub fn unmask_probability(s: usize, steps: usize) -> f64 {
    1.0 / (steps - s) as f64
}

fn dfm_chunk<F: Scalar>(model: &Model<F>, scfg: &SamplerConfig, start: usize, end: usize) -> Result<Vec<CodeGrid>> {
    let g = model.cfg.g;
    let steps = scfg.steps;
    let mut rngs: Vec<_> = (start..end).map(|i| item_stream(scfg.seed, "sampler", i as u64)).collect();
    let mut grids: Vec<MaskedGrid> = (start..end).map(|_| MaskedGrid::all_masked(g)).collect();
    let draw = |probs: &Array2<F>, pos: usize, rng: &mut _| {
        let p: Vec<f64> = probs.row(pos).iter().map(|x| x.as_f64()).collect();
        sample_categorical(rng, &p)
    };
    for s in 0..steps {
        if grids.iter().all(|m| m.num_masked() == 0) {
            break;
        }
        let t = s as f64 / steps as f64;
        let p_unmask = unmask_probability(s, steps);
        let probs = token_probs(model, scfg, &grids, F::lit(t))?;
        for ((grid, rng), pr) in grids.iter_mut().zip(rngs.iter_mut()).zip(&probs) {
            for pos in 0..g {
                if grid.is_masked(pos) && rng.random::<f64>() < p_unmask {
                    grid.0[pos] = Some(draw(pr, pos, rng));
                }
            }
        }
    }
    if grids.iter().any(|m| m.num_masked() > 0) {
        let t = (steps - 1) as f64 / steps as f64;
        let probs = token_probs(model, scfg, &grids, F::lit(t))?;
        for ((grid, rng), pr) in grids.iter_mut().zip(rngs.iter_mut()).zip(&probs) {
            for pos in 0..g {
                if grid.is_masked(pos) {
                    grid.0[pos] = Some(draw(pr, pos, rng));
                }
            }
        }
    }
    Ok(grids.into_iter().map(|m| m.to_grid().expect("all positions resolved")).collect())
}

/// Sample from any trained model, dispatching on its head.
pub fn generate<F: Scalar>(model: &Model<F>, scfg: &SamplerConfig) -> Result<SampleOutput<F>> {
    let g = model.cfg.g;
    match model.cfg.head {
        Head::Categorical => euler_sample(&PurrVelocity::new(model, scfg)?, &model.codebook, g, scfg),
        Head::Velocity => euler_sample(&CfmVelocity::new(model, scfg)?, &model.codebook, g, scfg),
        Head::DiscreteToken => {
            let codes = dfm_sample(model, scfg)?;
            let z_final = codes.iter().map(|c| model.codebook.embed(c)).collect::<Result<_>>()?;
            Ok(SampleOutput { codes, z_final })
        }
    }
}

/// CSV of `sample,zT_norm,quant_dist`: the Frobenius norm of each end state
/// and its distance to the embedding of the chosen codes.
pub fn write_zt_csv<W: Write, F: Scalar>(mut w: W, out: &SampleOutput<F>, cb: &Codebook<F>) -> Result<()> {
    writeln!(w, "sample,zT_norm,quant_dist")?;
    for (i, (z, c)) in out.z_final.iter().zip(&out.codes).enumerate() {
        let norm = z.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let e = cb.embed(c)?;
        let dist = z.iter().zip(e.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt();
        writeln!(w, "{i},{norm},{dist}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
