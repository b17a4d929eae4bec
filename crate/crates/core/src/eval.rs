//! Evaluation against the exact data distribution: code histograms, TV and
//! KL distances, posterior fidelity against the Bayes oracle, temperature
//! sweeps and the three-method convergence comparison.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;

use crate::codebook::{CodeGrid, LatentPoint};
use crate::config::RunConfig;
use crate::data::{DataSpec, ENUMERATION_LIMIT};
use crate::error::{Error, Result};
use crate::model::{softmax_temp, BatchInput, Head, Model, PosteriorLogits};
use crate::path::{interpolate, sample_prior_with, OraclePosterior, TimePoint};
use crate::rng::item_stream;
use crate::sampling::{generate, SamplerConfig};
use crate::scalar::Scalar;
use crate::training::{Method, Trainer};

/// Tolerance on distribution normalization.
pub const NORM_TOL: f64 = 1e-6;

/// Floor applied to `q` inside KL.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub k: usize,
    pub g: usize,
    pub n: u64,
    /// Counts over `[K]^G`, present when `K^G` is within the enumeration guard.
    pub joint: Option<Vec<u64>>,
    /// `G x K` counts.
    pub per_position: Array2<u64>,
}

impl Histogram {
    /// Empirical joint distribution. All zeros when `n = 0`.
    pub fn joint_probs(&self) -> Result<Vec<f64>> {
        let joint = self.joint.as_ref().ok_or(Error::EnumerationGuard {
            cells: (self.k as u128).saturating_pow(self.g as u32),
            limit: ENUMERATION_LIMIT,
        })?;
        Ok(joint.iter().map(|&c| c as f64 / self.n.max(1) as f64).collect())
    }

    /// Empirical per-position marginal at `g`.
    pub fn marginal_probs(&self, g: usize) -> Vec<f64> {
        self.per_position.row(g).iter().map(|&c| c as f64 / self.n.max(1) as f64).collect()
    }

    /// Mean over positions of the marginal entropy (nats).
    pub fn mean_entropy(&self) -> f64 {
        (0..self.g).map(|g| entropy(&self.marginal_probs(g))).sum::<f64>() / self.g as f64
    }
}

pub fn histogram(samples: &[CodeGrid], k: usize, g: usize) -> Result<Histogram> {
    let cells = (k as u128).saturating_pow(g as u32);
    let mut joint = (cells <= ENUMERATION_LIMIT as u128).then(|| vec![0u64; cells as usize]);
    let mut per_position = Array2::zeros((g, k));
    for s in samples {
        if s.len() != g {
            return Err(Error::shape(format!("grid of length {}, expected {g}", s.len())));
        }
        s.check(k)?;
        for (pos, &c) in s.codes().iter().enumerate() {
            per_position[[pos, c]] += 1;
        }
        if let Some(j) = joint.as_mut() {
            j[s.joint_index(k)] += 1;
        }
    }
    Ok(Histogram { k, g, n: samples.len() as u64, joint, per_position })
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("supports of size {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > NORM_TOL || d.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Normalization(format!("{name} sums to {s}")));
        }
    }
    Ok(())
}

/// `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok((0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// `sum p log(p / max(q, floor))` with `0 log 0 = 0`, clamped at 0.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q, floor))
}

fn kl_unchecked(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(floor).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.recip().ln()).sum()
}

/// Anything that produces `G x K` posteriors over codes at `(z_t, t)`.
pub trait PosteriorSource {
    fn posteriors(&self, zt: &[LatentPoint<f64>], t: &[f64]) -> Result<Vec<Array2<f64>>>;
}

impl<F: Scalar> PosteriorSource for Model<F> {
    /// Unconditional softmax at temperature 1.
    fn posteriors(&self, zt: &[LatentPoint<f64>], t: &[f64]) -> Result<Vec<Array2<f64>>> {
        if self.cfg.head != Head::Categorical {
            return Err(Error::MethodMismatch {
                expected: Method::Purrception.to_string(),
                found: format!("{:?} head", self.cfg.head),
            });
        }
        let input = BatchInput::Latent(zt.iter().map(|z| z.mapv(F::lit)).collect());
        let tf: Vec<F> = t.iter().map(|&x| F::lit(x)).collect();
        let logits = self.forward_grids(&input, &tf, &vec![None; zt.len()])?;
        logits
            .into_iter()
            .map(|l| Ok(softmax_temp(&PosteriorLogits::new(l)?, F::one())?.mapv(|x| x.as_f64())))
            .collect()
    }
}

impl PosteriorSource for OraclePosterior {
    fn posteriors(&self, zt: &[LatentPoint<f64>], t: &[f64]) -> Result<Vec<Array2<f64>>> {
        zt.iter().zip(t).map(|(z, &ti)| self.bayes_posterior(z, ti)).collect()
    }
}

fn d_probes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_probes")]
    pub n_probes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n_probes: d_probes(), seed: 0 }
    }
}

/// `(t, z_t)` pairs drawn like training inputs: a data grid, Gaussian noise
/// and a uniform time.
pub fn probe_points(spec: &DataSpec, oracle: &OraclePosterior, probe: &ProbeConfig) -> Result<Vec<(f64, LatentPoint<f64>)>> {
    let cb = oracle.codebook();
    (0..probe.n_probes)
        .map(|i| {
            let mut rng = item_stream(probe.seed, "probe", i as u64);
            let c = spec.sample(&mut rng);
            let t = TimePoint::sample(&mut rng).get();
            let z0: LatentPoint<f64> = sample_prior_with(spec.g(), cb.e(), &mut rng);
            Ok((t, interpolate(&z0, &cb.embed(&c)?, t)?))
        })
        .collect()
}

/// Mean over probes and positions of `KL(bayes posterior || source)`.
pub fn posterior_fidelity<S: PosteriorSource + ?Sized>(
    source: &S,
    oracle: &OraclePosterior,
    spec: &DataSpec,
    probe: &ProbeConfig,
) -> Result<f64> {
    if probe.n_probes == 0 {
        return Err(Error::Config("posterior fidelity needs at least one probe".into()));
    }
    let points = probe_points(spec, oracle, probe)?;
    let (t, z): (Vec<f64>, Vec<LatentPoint<f64>>) = points.into_iter().unzip();
    let truth = oracle.posteriors(&z, &t)?;
    let mut total = 0.0;
    for chunk in (0..z.len()).collect::<Vec<_>>().chunks(crate::sampling::CHUNK) {
        let (a, b) = (chunk[0], chunk[chunk.len() - 1] + 1);
        let model = source.posteriors(&z[a..b], &t[a..b])?;
        for (p, q) in truth[a..b].iter().zip(&model) {
            for g in 0..p.nrows() {
                let (pr, qr) = (p.row(g).to_vec(), q.row(g).to_vec());
                total += kl_unchecked(&pr, &qr, KL_FLOOR);
            }
        }
    }
    Ok(total / (z.len() * oracle.g()) as f64)
}

/// Distance of a sample set to the exact joint and marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub tv_joint: f64,
    /// Mean over positions of the marginal TV.
    pub tv_marg: f64,
    pub entropy: f64,
}

pub fn score_samples(samples: &[CodeGrid], spec: &DataSpec) -> Result<SampleScore> {
    let (g, k) = (spec.g(), spec.k());
    let exact = spec.exact_joint()?;
    let hist = histogram(samples, k, g)?;
    if hist.n == 0 {
        return Err(Error::Config("cannot score an empty sample set".into()));
    }
    let tv_joint = tv_distance(&hist.joint_probs()?, &exact)?;
    let marg = spec.marginals();
    let mut tv_marg = 0.0;
    for (pos, m) in marg.iter().enumerate() {
        tv_marg += tv_distance(&hist.marginal_probs(pos), m)?;
    }
    Ok(SampleScore { tv_joint, tv_marg: tv_marg / g as f64, entropy: hist.mean_entropy() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub tv_joint: f64,
    pub tv_marg: f64,
    pub entropy: f64,
    pub n: usize,
    pub seed: u64,
}

/// Sample at each temperature (in ascending order) and score against the
/// exact joint. Every temperature reuses the same sampler seed.
pub fn temperature_sweep<F: Scalar>(
    model: &Model<F>,
    spec: &DataSpec,
    taus: &[f64],
    scfg: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    if model.cfg.head == Head::Velocity {
        return Err(Error::MethodMismatch { expected: "a logit head".into(), found: Method::Cfm.to_string() });
    }
    spec.exact_joint()?;
    let mut taus = taus.to_vec();
    if taus.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("temperatures must be finite".into()));
    }
    taus.sort_by(f64::total_cmp);
    taus.iter()
        .map(|&tau| {
            let cfg = SamplerConfig { tau, ..scfg.clone() };
            let out = generate(model, &cfg)?;
            let s = score_samples(&out.codes, spec)?;
            Ok(SweepRow { tau, tv_joint: s.tv_joint, tv_marg: s.tv_marg, entropy: s.entropy, n: cfg.n_samples, seed: cfg.seed })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "tau,tv_joint,tv_marg,entropy,n,seed")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.tau, r.tv_joint, r.tv_marg, r.entropy, r.n, r.seed)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub iteration: u64,
    pub tv_joint: f64,
    pub tv_marg: f64,
    pub wall_ms: u64,
}

/// Iterations at which the comparison evaluates: every multiple of
/// `eval_every` up to `iterations`, plus `iterations` itself.
pub fn eval_schedule(iterations: u64, eval_every: u64) -> Vec<u64> {
    let every = eval_every.max(1);
    let mut its: Vec<u64> = (1..).map(|i| i * every).take_while(|&i| i < iterations).collect();
    its.push(iterations);
    its
}

/// Train one run per method side by side, sampling from each EMA model at
/// every scheduled iteration. Rows come out grouped by iteration in the
/// order the configs were given.
pub fn convergence_compare(cfgs: &[RunConfig], eval_every: u64) -> Result<Vec<CompareRow>> {
    let mut seen: Vec<Method> = cfgs.iter().map(|c| c.method).collect();
    seen.sort_by_key(|m| *m as u8);
    if seen != Method::ALL {
        return Err(Error::Config(format!(
            "compare needs exactly one config per method, got {:?}",
            cfgs.iter().map(|c| c.method.as_str()).collect::<Vec<_>>()
        )));
    }
    let first = &cfgs[0];
    for c in &cfgs[1..] {
        if c.data != first.data || c.codebook != first.codebook || c.seed != first.seed {
            return Err(Error::Config("compare configs must share data, codebook and seed".into()));
        }
        if c.optim.iterations != first.optim.iterations {
            return Err(Error::Config("compare configs must share the iteration budget".into()));
        }
    }
    first.data.exact_joint()?;
    let mut trainers: Vec<Trainer> = cfgs.iter().map(Trainer::new).collect::<Result<_>>()?;
    let mut elapsed = vec![0u128; cfgs.len()];
    let mut rows = Vec::new();
    for it in eval_schedule(first.optim.iterations, eval_every) {
        for (i, (tr, cfg)) in trainers.iter_mut().zip(cfgs).enumerate() {
            let start = Instant::now();
            tr.run_until(it)?;
            elapsed[i] += start.elapsed().as_millis();
            let out = generate(&tr.ema_model(), &cfg.sampler)?;
            let s = score_samples(&out.codes, &cfg.data)?;
            let wall_ms = if cfg.logging.wall_clock { elapsed[i] as u64 } else { 0 };
            log::info!("compare {} @ {it}: tv_joint {:.4}", cfg.method, s.tv_joint);
            rows.push(CompareRow { method: cfg.method, iteration: it, tv_joint: s.tv_joint, tv_marg: s.tv_marg, wall_ms });
        }
    }
    Ok(rows)
}

pub fn write_compare_csv<W: Write>(mut w: W, rows: &[CompareRow]) -> Result<()> {
    writeln!(w, "method,iteration,tv_joint,tv_marg,wall_ms")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.method, r.iteration, r.tv_joint, r.tv_marg, r.wall_ms)?;
    }
    Ok(())
}

/// Sample with the exact marginal velocity and score the result.
pub fn oracle_transport(spec: &DataSpec, oracle: &OraclePosterior, scfg: &SamplerConfig) -> Result<SampleScore> {
    let field = crate::sampling::OracleVelocity { oracle };
    let out = crate::sampling::euler_sample(&field, oracle.codebook(), spec.g(), scfg)?;
    score_samples(&out.codes, spec)
}

#[cfg(test)]
mod tests;
