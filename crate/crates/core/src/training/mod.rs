//! The optimization loop: batch construction for each method, AdamW with an
//! EMA copy of the parameters, a metrics log and checkpoints.
//!
//! Every iteration draws its randomness from per-iteration substreams of the
//! run seed, so a run resumed from a checkpoint continues exactly as an
//! uninterrupted one would.

mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodeGrid, Codebook, LatentPoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Batch, BatchInput, Head, LossKind, Model, Params, Targets};
use crate::objectives::{dfm_corrupt_with, LossReport, MaskedGrid};
use crate::path::{interpolate, sample_prior_with, TimePoint};
use crate::rng::item_stream;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{ema_update, optim_step, AdamState, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Purrception,
    Cfm,
    Dfm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Purrception, Method::Cfm, Method::Dfm];

    pub fn head(self) -> Head {
        match self {
            Method::Purrception => Head::Categorical,
            Method::Cfm => Head::Velocity,
            Method::Dfm => Head::DiscreteToken,
        }
    }

    pub fn loss_kind(self, z_coeff: f64) -> LossKind {
        match self {
            Method::Purrception => LossKind::Purr { z_coeff },
            Method::Cfm => LossKind::Cfm,
            Method::Dfm => LossKind::Dfm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Purrception => "purrception",
            Method::Cfm => "cfm",
            Method::Dfm => "dfm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of the metrics log, averaged over the iterations since the
/// previous line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub wall_ms: u64,
    pub loss_total: f64,
    pub loss_primary: f64,
    pub loss_z: f64,
    pub grad_norm: f64,
    pub mean_log2z: f64,
}

pub const METRICS_HEADER: &str = "iteration,wall_ms,loss_total,loss_primary,loss_z,grad_norm,mean_log2Z";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.wall_ms,
            self.loss_total,
            self.loss_primary,
            self.loss_z,
            self.grad_norm,
            self.mean_log2z
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
struct Window {
    n: u64,
    total: f64,
    primary: f64,
    z: f64,
    grad_norm: f64,
    log2z: f64,
}

/// Training state for one run. Parameters are single precision.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub method: Method,
    pub optim: OptimConfig,
    pub data: crate::data::DataSpec,
    pub codebook: Codebook<f64>,
    pub seed: u64,
    pub log_every: u64,
    pub wall_clock: bool,
    pub model: Model<f32>,
    pub ema: Params<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub metrics: Vec<MetricsRow>,
    /// Primary loss of every completed iteration.
    pub primary_history: Vec<f64>,
    window: Window,
    bad_streak: u32,
    started: Option<Instant>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model_config(), cfg.codebook.cast(), derive_seed(cfg.seed, "init"))?;
        let n = model.params.len();
        Ok(Trainer {
            method: cfg.method,
            optim: cfg.optim.clone(),
            data: cfg.data.clone(),
            codebook: cfg.codebook.clone(),
            seed: cfg.seed,
            log_every: cfg.logging.log_every,
            wall_clock: cfg.logging.wall_clock,
            ema: model.params.clone(),
            model,
            adam: AdamState::new(n),
            iteration: 0,
            metrics: Vec::new(),
            primary_history: Vec::new(),
            window: Window::default(),
            bad_streak: 0,
            started: None,
        })
    }

    /// Continue from a checkpoint. The metrics log starts empty.
    pub fn resume(ckpt: &Checkpoint, log_every: u64, wall_clock: bool) -> Result<Self> {
        let model = Model::new(ckpt.model.clone(), ckpt.params.clone(), ckpt.codebook.cast())?;
        Ok(Trainer {
            method: ckpt.method,
            optim: ckpt.optim.clone(),
            data: ckpt.data.clone(),
            codebook: ckpt.codebook.clone(),
            seed: ckpt.seed,
            log_every: log_every.max(1),
            wall_clock,
            ema: ckpt.ema.clone(),
            model,
            adam: ckpt.adam.clone(),
            iteration: ckpt.iteration,
            metrics: Vec::new(),
            primary_history: Vec::new(),
            window: Window::default(),
            bad_streak: 0,
            started: None,
        })
    }

    /// Model carrying the EMA parameters, used for all inference.
    pub fn ema_model(&self) -> Model<f32> {
        self.model.with_params(self.ema.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.method,
            self.model.cfg.clone(),
            self.optim.clone(),
            self.data.clone(),
            self.codebook.clone(),
            self.seed,
            self.iteration,
            self.model.params.clone(),
            self.ema.clone(),
            self.adam.clone(),
        )
    }

    /// Build the batch for iteration `it` (0-based).
    pub fn make_batch(&self, it: u64) -> Result<Batch<f32>> {
        let b_n = self.optim.batch_size;
        let (g, e) = (self.data.g(), self.codebook.e());
        let mut data_rng = item_stream(self.seed, "data", it);
        let mut label_rng = item_stream(self.seed, "labels", it);
        let mut time_rng = item_stream(self.seed, "time", it);
        let mut prior_rng = item_stream(self.seed, "prior", it);
        let mut mask_rng = item_stream(self.seed, "mask", it);
        let cb = &self.model.codebook;
        let drop = self.model.cfg.class_drop_prob;

        let mut grids: Vec<CodeGrid> = Vec::with_capacity(b_n);
        let mut labels = Vec::with_capacity(b_n);
        let mut times = Vec::with_capacity(b_n);
        for _ in 0..b_n {
            let (label, grid) = self.data.sample_labeled(&mut data_rng);
            let label = match label {
                Some(y) if label_rng.random::<f64>() >= drop => Some(y),
                _ => None,
            };
            grids.push(grid);
            labels.push(label);
            times.push(TimePoint::sample(&mut time_rng));
        }

        let t32: Vec<f32> = times.iter().map(|t| t.get() as f32).collect();
        let (input, targets) = match self.method {
            Method::Purrception | Method::Cfm => {
                let mut zts: Vec<LatentPoint<f32>> = Vec::with_capacity(b_n);
                let mut vel = Vec::new();
                for (grid, &t) in grids.iter().zip(&t32) {
                    let z1 = cb.embed(grid)?;
                    let z0: LatentPoint<f32> = sample_prior_with(g, e, &mut prior_rng);
                    zts.push(interpolate(&z0, &z1, t)?);
                    if self.method == Method::Cfm {
                        vel.push(&z1 - &z0);
                    }
                }
                let targets = match self.method {
                    Method::Cfm => Targets::Velocity(vel),
                    _ => Targets::Codes(grids),
                };
                (BatchInput::Latent(zts), targets)
            }
            Method::Dfm => {
                let masked: Vec<MaskedGrid> =
                    grids.iter().zip(&times).map(|(c, &t)| dfm_corrupt_with(c, t, &mut mask_rng)).collect();
                (BatchInput::Tokens(masked), Targets::Codes(grids))
            }
        };
        Ok(Batch { input, t: t32, labels, targets })
    }

    /// One optimizer iteration. A non-finite loss or gradient skips the
    /// update; two in a row abort the run.
    pub fn step(&mut self) -> Result<()> {
        let started = *self.started.get_or_insert_with(Instant::now);
        let it = self.iteration;
        let batch = self.make_batch(it)?;
        let kind = self.method.loss_kind(self.optim.z_coeff);
        let outcome = self.model.backward(&batch, kind).and_then(|(rep, grads)| {
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            optim_step(self.model.params.values_mut(), &grads, &mut self.adam, &self.optim)?;
            Ok((rep, norm))
        });
        let (rep, norm) = match outcome {
            Ok(v) => {
                self.bad_streak = 0;
                v
            }
            Err(Error::NonFinite(detail)) => {
                self.bad_streak += 1;
                log::warn!("iteration {it}: non-finite {detail}; update skipped");
                if self.bad_streak >= 2 {
                    return Err(Error::NumericalAbort { iteration: it, detail: self.diagnostic(&detail) });
                }
                self.iteration += 1;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let decay = self.optim.ema_decay_at(self.adam.step);
        ema_update(self.ema.values_mut(), self.model.params.values(), decay);
        self.iteration += 1;
        self.primary_history.push(rep.primary);
        self.record(&rep, norm, started);
        Ok(())
    }

    fn diagnostic(&self, detail: &str) -> String {
        let p = self.model.params.values();
        let max_abs = p.iter().filter(|v| v.is_finite()).fold(0f32, |m, v| m.max(v.abs()));
        let nonfinite = p.iter().filter(|v| !v.is_finite()).count();
        let last = self.primary_history.last().copied().unwrap_or(f64::NAN);
        format!(
            "two consecutive non-finite losses ({detail}); last finite primary loss {last}, \
             max |param| {max_abs}, {nonfinite} non-finite params, adam step {}",
            self.adam.step
        )
    }

    fn record(&mut self, rep: &LossReport, norm: f64, started: Instant) {
        let w = &mut self.window;
        w.n += 1;
        w.total += rep.total;
        w.primary += rep.primary;
        w.z += rep.z_term;
        w.grad_norm += norm;
        w.log2z += rep.log_z_sq;
        if self.iteration % self.log_every == 0 {
            let n = w.n as f64;
            let wall_ms = if self.wall_clock { started.elapsed().as_millis() as u64 } else { 0 };
            self.metrics.push(MetricsRow {
                iteration: self.iteration,
                wall_ms,
                loss_total: w.total / n,
                loss_primary: w.primary / n,
                loss_z: w.z / n,
                grad_norm: w.grad_norm / n,
                mean_log2z: w.log2z / n,
            });
            log::info!("{} iteration {}: loss {:.5}", self.method, self.iteration, w.total / n);
            self.window = Window::default();
        }
    }

    /// Train until `iteration == until`.
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        while self.iteration < until {
            self.step()?;
        }
        Ok(())
    }

    /// Train to the configured iteration count.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.optim.iterations)
    }

    /// As [`Trainer::run`], also writing a checkpoint into `ckpt_dir` every
    /// `ckpt_every` iterations before the last.
    pub fn run_with_checkpoints(&mut self, ckpt_every: Option<u64>, ckpt_dir: Option<&Path>) -> Result<()> {
        while self.iteration < self.optim.iterations {
            self.step()?;
            if let (Some(every), Some(dir)) = (ckpt_every, ckpt_dir) {
                if self.iteration % every == 0 && self.iteration < self.optim.iterations {
                    self.checkpoint().save(&checkpoint_path(dir, Some(self.iteration)))?;
                }
            }
        }
        Ok(())
    }
}

/// `ckpt_final.bin`, or `ckpt_{iteration}.bin` for intermediate checkpoints.
pub fn checkpoint_path(dir: &Path, iteration: Option<u64>) -> PathBuf {
    match iteration {
        Some(i) => dir.join(format!("ckpt_{i:08}.bin")),
        None => dir.join("ckpt_final.bin"),
    }
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    item_stream(seed, label, 0).random()
}

/// Train a run to completion and return its final checkpoint and metrics.
pub fn train(cfg: &RunConfig) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut tr = Trainer::new(cfg)?;
    tr.run()?;
    Ok((tr.checkpoint(), tr.metrics))
}
