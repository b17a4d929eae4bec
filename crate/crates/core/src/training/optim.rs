use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::DEFAULT_Z_COEFF;
use crate::scalar::Scalar;

fn d_lr() -> f64 {
    1e-4
}
fn d_wd() -> f64 {
    0.01
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-6
}
fn d_batch() -> usize {
    128
}
fn d_ema() -> f64 {
    0.9999
}
fn d_true() -> bool {
    true
}
fn d_z() -> f64 {
    DEFAULT_Z_COEFF
}

/// AdamW, EMA and loop-length settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_b1")]
    pub beta1: f64,
    #[serde(default = "d_b2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub iterations: u64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    /// Cap the EMA decay at `(1 + n) / (10 + n)` after `n` updates.
    #[serde(default = "d_true")]
    pub ema_warmup: bool,
    /// z-loss weight for the categorical objective.
    #[serde(default = "d_z")]
    pub z_coeff: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: d_lr(),
            weight_decay: d_wd(),
            beta1: d_b1(),
            beta2: d_b2(),
            eps: d_eps(),
            batch_size: d_batch(),
            iterations: 0,
            ema_decay: d_ema(),
            ema_warmup: true,
            z_coeff: d_z(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim: {m}")));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return bad("lr and eps must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("weight_decay must be >= 0 and ema_decay in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.z_coeff >= 0.0) {
            return bad("z_coeff must be >= 0");
        }
        Ok(())
    }

    /// EMA decay to use for update number `n` (1-based).
    pub fn ema_decay_at(&self, n: u64) -> f64 {
        if self.ema_warmup {
            self.ema_decay.min((1.0 + n as f64) / (10.0 + n as f64))
        } else {
            self.ema_decay
        }
    }
}

/// First and second moments plus the completed step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![F::zero(); n], v: vec![F::zero(); n], step: 0 }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay and constant lr.
/// Non-finite gradients leave both params and state untouched.
pub fn optim_step<F: Scalar>(params: &mut [F], grads: &[F], state: &mut AdamState<F>, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("params, grads and optimizer state differ in length"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.step += 1;
    let step = state.step as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = F::lit(1.0 / (1.0 - cfg.beta1.powi(step)));
    let c2 = F::lit(1.0 / (1.0 - cfg.beta2.powi(step)));
    let lr = F::lit(cfg.lr);
    let shrink = F::lit(1.0 - cfg.lr * cfg.weight_decay);
    let eps = F::lit(cfg.eps);
    let one = F::one();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m * c1;
        let vhat = *v * c2;
        *p = *p * shrink - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<F: Scalar>(ema: &mut [F], params: &[F], decay: f64) {
    debug_assert_eq!(ema.len(), params.len());
    let d = F::lit(decay);
    let w = F::lit(1.0 - decay);
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = d * *e + w * p;
    }
}
