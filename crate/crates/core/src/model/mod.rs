//! The posterior network: a small MLP from `(z_t, t, label)` to per-position
//! logits (categorical and discrete-token heads) or a velocity (velocity
//! head), with an exact reverse pass.

mod gradcheck;
mod params;
mod posterior;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::codebook::{CodeGrid, Codebook, LatentPoint};
use crate::error::{Error, Result};
use crate::objectives::{dfm_loss_grad, purr_loss_grad, velocity_mse_grad, LossReport, MaskedGrid};
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, GRAD_CHECK_COORDS};
pub use params::{init_params, layout, Params, Slot};
pub use posterior::{posterior_mean, softmax_temp, PosteriorLogits, TAU_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// `G x K` logits over codes from a continuous `z_t`.
    Categorical,
    /// `G x E` velocity from a continuous `z_t`.
    Velocity,
    /// `G x K` logits from a partially masked code grid.
    DiscreteToken,
}

fn default_width() -> usize {
    256
}
fn default_layers() -> usize {
    2
}
fn default_time_features() -> usize {
    16
}
fn default_class_features() -> usize {
    16
}
fn default_drop() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_layers")]
    pub hidden_layers: usize,
    pub head: Head,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default = "default_class_features")]
    pub class_features: usize,
    #[serde(default = "default_drop")]
    pub class_drop_prob: f64,
}

impl ModelConfig {
    pub fn new(g: usize, k: usize, e: usize, head: Head) -> Self {
        ModelConfig {
            g,
            k,
            e,
            hidden_width: default_width(),
            hidden_layers: default_layers(),
            head,
            num_classes: None,
            time_features: default_time_features(),
            class_features: default_class_features(),
            class_drop_prob: default_drop(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.g == 0 || self.k < 2 || self.e == 0 {
            return bad("G, E must be >= 1 and K >= 2");
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return bad("hidden_width and hidden_layers must be >= 1");
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return bad("time_features must be a positive even number");
        }
        if self.num_classes == Some(0) || (self.num_classes.is_some() && self.class_features == 0) {
            return bad("class conditioning needs num_classes >= 1 and class_features >= 1");
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return bad("class_drop_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.g * self.e
    }

    fn class_dim(&self) -> usize {
        if self.num_classes.is_some() {
            self.class_features
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim() + self.time_features + self.class_dim()
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Categorical | Head::DiscreteToken => self.g * self.k,
            Head::Velocity => self.g * self.e,
        }
    }

    /// Columns per position in the head output.
    pub fn output_cols(&self) -> usize {
        self.output_dim() / self.g
    }
}

/// Sinusoidal features `sin(f t), cos(f t)` with frequencies geometric in `[1, 1000]`.
pub fn time_features<F: Scalar>(t: F, n: usize) -> Vec<F> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..half {
        let expo = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let arg = t * F::lit(1000f64.powf(expo));
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Gaussian-error linear unit, tanh form.
fn gelu<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    F::lit(0.5) * (F::one() + th) + F::lit(0.5) * x * (F::one() - th * th) * du
}

/// Network input for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput<F> {
    /// Continuous states `z_t`, each `G x E`.
    Latent(Vec<LatentPoint<F>>),
    /// Partially masked code grids for the discrete-token head.
    Tokens(Vec<MaskedGrid>),
}

impl<F> BatchInput<F> {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Latent(v) => v.len(),
            BatchInput::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<F> {
    Codes(Vec<CodeGrid>),
    Velocity(Vec<Array2<F>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Cross-entropy plus weighted z-loss.
    Purr { z_coeff: f64 },
    /// Velocity regression.
    Cfm,
    /// Cross-entropy over masked positions.
    Dfm,
}

/// A training batch: inputs, per-sample times and labels, and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub input: BatchInput<F>,
    pub t: Vec<F>,
    pub labels: Vec<Option<usize>>,
    pub targets: Targets<F>,
}

/// Output of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput<F> {
    Logits(PosteriorLogits<F>),
    Velocity(Array2<F>),
}

struct Trace<F> {
    /// Layer inputs: the feature matrix, then each hidden activation.
    inputs: Vec<Array2<F>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<F>>,
    out: Array2<F>,
}

/// Network parameters with their configuration and the frozen codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: Params<F>,
    pub codebook: Codebook<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, params: Params<F>, codebook: Codebook<F>) -> Result<Self> {
        cfg.validate()?;
        if codebook.k() != cfg.k || codebook.e() != cfg.e {
            return Err(Error::Config(format!(
                "codebook is {}x{}, model expects K={}, E={}",
                codebook.k(),
                codebook.e(),
                cfg.k,
                cfg.e
            )));
        }
        if params.slots() != layout(&cfg).as_slice() {
            return Err(Error::shape("parameter layout does not match model config"));
        }
        Ok(Model { cfg, params, codebook })
    }

    pub fn init(cfg: ModelConfig, codebook: Codebook<F>, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params, codebook)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), codebook: self.codebook.cast() }
    }

    pub fn with_params(&self, params: Params<F>) -> Self {
        Model { cfg: self.cfg.clone(), params, codebook: self.codebook.clone() }
    }

    fn features(&self, input: &BatchInput<F>, t: &[F], labels: &[Option<usize>]) -> Result<Array2<F>> {
        let cfg = &self.cfg;
        let b_n = input.len();
        if t.len() != b_n || labels.len() != b_n {
            return Err(Error::shape(format!("{b_n} inputs, {} times, {} labels", t.len(), labels.len())));
        }
        if b_n == 0 {
            return Err(Error::shape("empty batch"));
        }
        let (ld, tf) = (cfg.latent_dim(), cfg.time_features);
        let mut x = Array2::zeros((b_n, cfg.input_dim()));
        match (input, cfg.head) {
            (BatchInput::Latent(zs), Head::Categorical | Head::Velocity) => {
                for (b, z) in zs.iter().enumerate() {
                    if z.dim() != (cfg.g, cfg.e) {
                        return Err(Error::shape(format!("z_t is {:?}, expected ({}, {})", z.dim(), cfg.g, cfg.e)));
                    }
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("z_t".into()));
                    }
                    for (dst, &src) in x.slice_mut(s![b, ..ld]).iter_mut().zip(z.iter()) {
                        *dst = src;
                    }
                }
            }
            (BatchInput::Tokens(grids), Head::DiscreteToken) => {
                let mask = self.params.vector("mask.embed");
                for (b, grid) in grids.iter().enumerate() {
                    if grid.len() != cfg.g {
                        return Err(Error::shape(format!("masked grid of length {}, expected {}", grid.len(), cfg.g)));
                    }
                    for g in 0..cfg.g {
                        let mut dst = x.slice_mut(s![b, g * cfg.e..(g + 1) * cfg.e]);
                        match grid.0[g] {
                            Some(c) if c >= cfg.k => return Err(Error::IndexOutOfRange { index: c, k: cfg.k }),
                            Some(c) => dst.assign(&self.codebook.row(c)),
                            None => dst.assign(&mask),
                        }
                    }
                }
            }
            _ => return Err(Error::Config(format!("input kind does not match the {:?} head", cfg.head))),
        }
        for (b, &tb) in t.iter().enumerate() {
            for (dst, v) in x.slice_mut(s![b, ld..ld + tf]).iter_mut().zip(time_features(tb, tf)) {
                *dst = v;
            }
        }
        for (b, label) in labels.iter().enumerate() {
            match (cfg.num_classes, label) {
                (None, None) => {}
                (None, Some(_)) => return Err(Error::Config("label given to an unconditional model".into())),
                (Some(c), Some(y)) if *y >= c => {
                    return Err(Error::Config(format!("label {y} out of range for {c} classes")))
                }
                (Some(_), label) => {
                    let emb = match label {
                        Some(y) => self.params.matrix("class.embed").row(*y).to_owned(),
                        None => self.params.vector("class.null").to_owned(),
                    };
                    x.slice_mut(s![b, ld + tf..]).assign(&emb);
                }
            }
        }
        Ok(x)
    }

    fn trace(&self, input: &BatchInput<F>, t: &[F], labels: &[Option<usize>]) -> Result<Trace<F>> {
        let mut h = self.features(input, t, labels)?;
        let mut inputs = Vec::with_capacity(self.cfg.hidden_layers + 1);
        let mut pre = Vec::with_capacity(self.cfg.hidden_layers);
        for l in 0..self.cfg.hidden_layers {
            let w = self.params.matrix(&format!("hidden.{l}.weight"));
            let bias = self.params.vector(&format!("hidden.{l}.bias"));
            let a = h.dot(&w.t()) + &bias;
            let next = a.mapv(gelu);
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        let out = h.dot(&self.params.matrix("out.weight").t()) + &self.params.vector("out.bias");
        inputs.push(h);
        Ok(Trace { inputs, pre, out })
    }

    /// Raw head output, `B x output_dim`.
    pub fn forward_batch(&self, input: &BatchInput<F>, t: &[F], labels: &[Option<usize>]) -> Result<Array2<F>> {
        Ok(self.trace(input, t, labels)?.out)
    }

    /// Head output rows reshaped to `G x cols` per sample.
    pub fn forward_grids(&self, input: &BatchInput<F>, t: &[F], labels: &[Option<usize>]) -> Result<Vec<Array2<F>>> {
        let out = self.forward_batch(input, t, labels)?;
        let (g, cols) = (self.cfg.g, self.cfg.output_cols());
        Ok(out.outer_iter().map(|row| row.to_owned().into_shape_with_order((g, cols)).expect("row reshapes")).collect())
    }

    pub fn forward(&self, zt: &LatentPoint<F>, t: F, label: Option<usize>) -> Result<HeadOutput<F>> {
        let out = self
            .forward_grids(&BatchInput::Latent(vec![zt.clone()]), &[t], &[label])?
            .pop()
            .expect("one row");
        Ok(match self.cfg.head {
            Head::Velocity => HeadOutput::Velocity(out),
            _ => HeadOutput::Logits(PosteriorLogits::new(out)?),
        })
    }

    pub fn forward_tokens(&self, masked: &MaskedGrid, t: F, label: Option<usize>) -> Result<PosteriorLogits<F>> {
        let out = self
            .forward_grids(&BatchInput::Tokens(vec![masked.clone()]), &[t], &[label])?
            .pop()
            .expect("one row");
        PosteriorLogits::new(out)
    }

    /// Batch-mean loss report and gradient of the batch-mean loss with
    /// respect to the head output.
    fn head_loss(&self, batch: &Batch<F>, out: &Array2<F>, kind: LossKind) -> Result<(LossReport, Array2<F>)> {
        let (g, cols) = (self.cfg.g, self.cfg.output_cols());
        let b_n = out.nrows();
        let scale = F::lit(1.0 / b_n as f64);
        let mut dout = Array2::zeros(out.dim());
        let mut reports = Vec::with_capacity(b_n);
        for b in 0..b_n {
            let row = out.row(b);
            let view = ArrayView2::from_shape((g, cols), row.as_slice().expect("contiguous output row"))
                .map_err(|e| Error::shape(e.to_string()))?;
            let (rep, grad) = match (kind, &batch.targets, self.cfg.head) {
                (LossKind::Purr { z_coeff }, Targets::Codes(c), Head::Categorical) => {
                    purr_loss_grad(view, &c[b], z_coeff)?
                }
                (LossKind::Cfm, Targets::Velocity(v), Head::Velocity) => velocity_mse_grad(view, v[b].view())?,
                (LossKind::Dfm, Targets::Codes(c), Head::DiscreteToken) => match &batch.input {
                    BatchInput::Tokens(m) => dfm_loss_grad(view, &c[b], &m[b])?,
                    BatchInput::Latent(_) => return Err(Error::Config("DFM loss needs token inputs".into())),
                },
                _ => return Err(Error::Config(format!("{kind:?} loss does not fit the {:?} head", self.cfg.head))),
            };
            dout.row_mut(b).assign(&(grad.into_shape_with_order(g * cols).expect("flat") * scale));
            reports.push(rep);
        }
        let rep = LossReport::mean(&reports);
        if !rep.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {}", rep.total)));
        }
        Ok((rep, dout))
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        let n = batch.input.len();
        let targets = match &batch.targets {
            Targets::Codes(c) => c.len(),
            Targets::Velocity(v) => v.len(),
        };
        if n == 0 {
            return Err(Error::shape("empty batch"));
        }
        if targets != n {
            return Err(Error::shape(format!("{n} inputs but {targets} targets")));
        }
        Ok(())
    }

    /// Batch-mean loss without gradients.
    pub fn loss(&self, batch: &Batch<F>, kind: LossKind) -> Result<LossReport> {
        self.check_batch(batch)?;
        let out = self.forward_batch(&batch.input, &batch.t, &batch.labels)?;
        Ok(self.head_loss(batch, &out, kind)?.0)
    }

    /// Exact reverse-mode gradient of the batch-mean loss, laid out like `params`.
    pub fn backward(&self, batch: &Batch<F>, kind: LossKind) -> Result<(LossReport, Vec<F>)> {
        self.check_batch(batch)?;
        let tr = self.trace(&batch.input, &batch.t, &batch.labels)?;
        let (rep, dout) = self.head_loss(batch, &tr.out, kind)?;
        let mut grads = Params::<F>::zeros(&self.cfg);

        let h_last = tr.inputs.last().expect("output layer input");
        grads.matrix_mut("out.weight").assign(&dout.t().dot(h_last));
        grads.get_mut("out.bias").iter_mut().zip(dout.sum_axis(Axis(0))).for_each(|(d, s)| *d = s);
        let mut dh = dout.dot(&self.params.matrix("out.weight"));

        for l in (0..self.cfg.hidden_layers).rev() {
            let da = dh * &tr.pre[l].mapv(gelu_grad);
            grads.matrix_mut(&format!("hidden.{l}.weight")).assign(&da.t().dot(&tr.inputs[l]));
            grads
                .get_mut(&format!("hidden.{l}.bias"))
                .iter_mut()
                .zip(da.sum_axis(Axis(0)))
                .for_each(|(d, s)| *d = s);
            dh = da.dot(&self.params.matrix(&format!("hidden.{l}.weight")));
        }

        // dh is now the gradient with respect to the input features
        let (ld, tf) = (self.cfg.latent_dim(), self.cfg.time_features);
        if self.cfg.num_classes.is_some() {
            for (b, label) in batch.labels.iter().enumerate() {
                let d = dh.slice(s![b, ld + tf..]);
                match label {
                    Some(y) => {
                        let mut emb = grads.matrix_mut("class.embed");
                        let mut row = emb.row_mut(*y);
                        row += &d;
                    }
                    None => {
                        for (dst, &v) in grads.get_mut("class.null").iter_mut().zip(d.iter()) {
                            *dst += v;
                        }
                    }
                }
            }
        }
        if let BatchInput::Tokens(grids) = &batch.input {
            let e = self.cfg.e;
            for (b, grid) in grids.iter().enumerate() {
                for g in (0..self.cfg.g).filter(|&g| grid.is_masked(g)) {
                    let d = dh.slice(s![b, g * e..(g + 1) * e]);
                    for (dst, &v) in grads.get_mut("mask.embed").iter_mut().zip(d.iter()) {
                        *dst += v;
                    }
                }
            }
        }
        Ok((rep, grads.values().to_vec()))
    }
}
