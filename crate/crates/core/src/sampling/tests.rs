use std::sync::Mutex;

use super::*;
use crate::data::DataSpec;
use crate::model::{ModelConfig, Params};
use crate::path::sample_prior_with;
use crate::rng::EngineRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn cb() -> Codebook<f64> {
    Codebook::seeded(4, 2, 5).unwrap()
}

fn small(head: Head, classes: Option<usize>) -> ModelConfig {
    ModelConfig { hidden_width: 16, num_classes: classes, ..ModelConfig::new(2, 4, 2, head) }
}

fn jittered(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::init(cfg, cb(), seed).unwrap();
    let mut rng = EngineRng::seed_from_u64(seed + 99);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for v in m.params.values_mut() {
        *v += noise.sample(&mut rng);
    }
    m
}

fn scfg(n: usize, steps: usize) -> SamplerConfig {
    SamplerConfig { n_samples: n, steps, seed: 11, ..Default::default() }
}

/// Velocity toward a fixed code at every position.
struct ToCode {
    target: Array2<f64>,
}

impl VelocityField<f64> for ToCode {
    fn velocity(&self, z: &[LatentPoint<f64>], t: f64) -> Result<Vec<Array2<f64>>> {
        Ok(z.iter().map(|zi| (&self.target - zi) / (1.0 - t)).collect())
    }
}

struct Constant(Array2<f64>);

impl VelocityField<f64> for Constant {
    fn velocity(&self, z: &[LatentPoint<f64>], _t: f64) -> Result<Vec<Array2<f64>>> {
        Ok(vec![self.0.clone(); z.len()])
    }
}

/// Wraps a field and remembers the last state it was queried at.
struct Recording<'a, V> {
    inner: &'a V,
    last: Mutex<Option<(Vec<LatentPoint<f64>>, f64)>>,
}

impl<V: VelocityField<f64>> VelocityField<f64> for Recording<'_, V> {
    fn velocity(&self, z: &[LatentPoint<f64>], t: f64) -> Result<Vec<Array2<f64>>> {
        *self.last.lock().unwrap() = Some((z.to_vec(), t));
        self.inner.velocity(z, t)
    }
}

fn prior(i: usize, seed: u64) -> LatentPoint<f64> {
    sample_prior_with(2, 2, &mut item_stream(seed, "prior", i as u64))
}

#[test]
fn config_defaults_and_validation() {
    let c = SamplerConfig::default();
    assert_eq!((c.steps, c.tau, c.guidance_weight), (100, 0.9, 1.0));
    assert_eq!(c.guidance_space, GuidanceSpace::Logit);
    assert!(SamplerConfig { steps: 0, ..c.clone() }.validate().is_err());
    assert!(matches!(SamplerConfig { tau: 1e-4, ..c.clone() }.validate(), Err(Error::Temperature { .. })));
    assert!(SamplerConfig { guidance_weight: -0.1, ..c.clone() }.validate().is_err());
    let parsed: SamplerConfig = serde_json::from_str(r#"{"tau": 0.5, "guidance_space": "velocity"}"#).unwrap();
    assert_eq!(parsed.tau, 0.5);
    assert_eq!(parsed.guidance_space, GuidanceSpace::Velocity);
    assert!(serde_json::from_str::<SamplerConfig>(r#"{"temperature": 0.5}"#).is_err());
}

#[test]
fn one_hot_transport_is_exact() {
    let cb = cb();
    let target = cb.embed(&CodeGrid(vec![2, 2])).unwrap();
    let field = ToCode { target: target.clone() };
    for steps in [1, 7, 100] {
        let out = euler_sample(&field, &cb, 2, &scfg(20, steps)).unwrap();
        for (z, c) in out.z_final.iter().zip(&out.codes) {
            assert!((z - &target).iter().all(|d| d.abs() <= 1e-9), "steps {steps}");
            assert_eq!(c.codes(), &[2, 2]);
        }
    }
}

#[test]
fn single_step_is_one_euler_update() {
    let cb = cb();
    let c = ndarray::array![[0.5, -1.0], [2.0, 0.25]];
    let out = euler_sample(&Constant(c.clone()), &cb, 2, &scfg(5, 1)).unwrap();
    for (i, z) in out.z_final.iter().enumerate() {
        assert_eq!(z, &(prior(i, 11) + &c));
    }
}

#[test]
fn final_step_lands_on_posterior_mean() {
    let model = jittered(small(Head::Categorical, None), 3);
    let cfg = SamplerConfig { tau: 0.7, ..scfg(8, 10) };
    let purr = PurrVelocity::new(&model, &cfg).unwrap();
    let rec = Recording { inner: &purr, last: Mutex::new(None) };
    let out = euler_sample(&rec, &model.codebook, 2, &cfg).unwrap();
    let (z_last, t_last) = rec.last.lock().unwrap().take().unwrap();
    assert!((t_last - 0.9).abs() < 1e-15);
    let probs = purr.probs(&z_last, t_last).unwrap();
    for (p, z) in probs.iter().zip(&out.z_final) {
        let mu = posterior_mean(p, &model.codebook).unwrap();
        assert!((&mu - z).iter().all(|d| d.abs() <= 1e-12));
    }
}

#[test]
fn zero_init_model_moves_toward_centroid() {
    let model: Model<f64> = Model::init(small(Head::Categorical, None), cb(), 1).unwrap();
    let field = PurrVelocity::new(&model, &scfg(1, 10)).unwrap();
    let centroid = model.codebook.centroid();
    let z = vec![prior(0, 4)];
    let v = field.velocity(&z, 0.3).unwrap();
    for g in 0..2 {
        for e in 0..2 {
            let expect = (centroid[e] - z[0][[g, e]]) / 0.7;
            assert!((v[0][[g, e]] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_logits_give_single_code_velocity() {
    let mut model: Model<f64> = Model::init(small(Head::Categorical, None), cb(), 1).unwrap();
    // bias-only output: position logits fixed regardless of input
    let bias = model.params.get_mut("out.bias");
    bias.iter_mut().enumerate().for_each(|(i, b)| *b = if i % 4 == 1 { 40.0 } else { 0.0 });
    let field = PurrVelocity::new(&model, &SamplerConfig { tau: 0.01, ..scfg(1, 10) }).unwrap();
    let z = vec![prior(0, 2)];
    let v = field.velocity(&z, 0.5).unwrap();
    let e1 = model.codebook.row(1);
    for g in 0..2 {
        for e in 0..2 {
            assert!((v[0][[g, e]] - (e1[e] - z[0][[g, e]]) / 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn guidance_weight_one_is_noop() {
    let model = jittered(small(Head::Categorical, Some(3)), 5);
    let z: Vec<_> = (0..4).map(|i| prior(i, 6)).collect();
    let plain = PurrVelocity::new(&model, &SamplerConfig { label: Some(2), ..scfg(1, 10) }).unwrap();
    let v1 = plain.velocity(&z, 0.4).unwrap();
    let direct = model.forward_grids(&BatchInput::Latent(z.clone()), &[0.4; 4], &[Some(2); 4]).unwrap();
    for ((v, l), zi) in v1.iter().zip(direct).zip(&z) {
        let p = softmax_temp(&PosteriorLogits::new(l).unwrap(), 0.9).unwrap();
        let expect = (posterior_mean(&p, &model.codebook).unwrap() - zi) / 0.6;
        assert!((v - &expect).iter().all(|d| d.abs() < 1e-12));
    }
    // logit space with w = 1 + tiny differs only slightly; w = 0 gives the null model
    let null = PurrVelocity::new(&model, &SamplerConfig { label: Some(2), guidance_weight: 0.0, ..scfg(1, 10) }).unwrap();
    let unconditional = PurrVelocity::new(&model, &scfg(1, 10)).unwrap();
    assert_eq!(null.velocity(&z, 0.4).unwrap(), unconditional.velocity(&z, 0.4).unwrap());
    let vel = PurrVelocity::new(
        &model,
        &SamplerConfig { label: Some(2), guidance_weight: 0.0, guidance_space: GuidanceSpace::Velocity, ..scfg(1, 10) },
    )
    .unwrap();
    let a = vel.velocity(&z, 0.4).unwrap();
    let b = unconditional.velocity(&z, 0.4).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).iter().all(|d| d.abs() < 1e-12)));
}

#[test]
fn guidance_space_matters() {
    let model = jittered(small(Head::Categorical, Some(3)), 8);
    let z: Vec<_> = (0..3).map(|i| prior(i, 1)).collect();
    let base = SamplerConfig { label: Some(1), guidance_weight: 1.5, ..scfg(1, 10) };
    let logit = PurrVelocity::new(&model, &base).unwrap().velocity(&z, 0.5).unwrap();
    let vel = PurrVelocity::new(&model, &SamplerConfig { guidance_space: GuidanceSpace::Velocity, ..base })
        .unwrap()
        .velocity(&z, 0.5)
        .unwrap();
    assert!(logit.iter().zip(&vel).any(|(a, b)| (a - b).iter().any(|d| d.abs() > 1e-6)));
}

#[test]
fn guidance_errors() {
    let uncond = jittered(small(Head::Categorical, None), 1);
    let guided = SamplerConfig { guidance_weight: 1.3, label: Some(0), ..scfg(1, 10) };
    assert!(matches!(PurrVelocity::new(&uncond, &guided), Err(Error::Guidance(_))));
    let cond = jittered(small(Head::Categorical, Some(2)), 1);
    let no_label = SamplerConfig { guidance_weight: 1.3, ..scfg(1, 10) };
    assert!(matches!(PurrVelocity::new(&cond, &no_label), Err(Error::Guidance(_))));
    let cfm = jittered(small(Head::Velocity, None), 1);
    assert!(matches!(CfmVelocity::new(&cfm, &guided), Err(Error::Guidance(_))));
    let dfm = jittered(small(Head::DiscreteToken, None), 1);
    assert!(matches!(dfm_sample(&dfm, &guided), Err(Error::Guidance(_))));
}

#[test]
fn head_mismatch() {
    let cfm = jittered(small(Head::Velocity, None), 1);
    assert!(matches!(PurrVelocity::new(&cfm, &scfg(1, 2)), Err(Error::MethodMismatch { .. })));
    assert!(matches!(dfm_sample(&cfm, &scfg(1, 2)), Err(Error::MethodMismatch { .. })));
    let purr = jittered(small(Head::Categorical, None), 1);
    assert!(matches!(CfmVelocity::new(&purr, &scfg(1, 2)), Err(Error::MethodMismatch { .. })));
}

#[test]
fn zero_velocity_head_returns_prior() {
    let model: Model<f64> = Model::init(small(Head::Velocity, None), cb(), 2).unwrap();
    let out = generate(&model, &scfg(30, 5)).unwrap();
    for (i, (z, c)) in out.z_final.iter().zip(&out.codes).enumerate() {
        let z0 = prior(i, 11);
        assert_eq!(z, &z0);
        assert_eq!(c, &model.codebook.quantize(&z0).unwrap());
    }
}

#[test]
fn cfm_guidance_combines_velocities() {
    let model = jittered(small(Head::Velocity, Some(2)), 4);
    let z: Vec<_> = (0..3).map(|i| prior(i, 9)).collect();
    let w = 1.3;
    let guided = CfmVelocity::new(&model, &SamplerConfig { label: Some(1), guidance_weight: w, ..scfg(1, 4) })
        .unwrap()
        .velocity(&z, 0.2)
        .unwrap();
    let input = BatchInput::Latent(z.clone());
    let c = model.forward_grids(&input, &[0.2; 3], &[Some(1); 3]).unwrap();
    let n = model.forward_grids(&input, &[0.2; 3], &[None; 3]).unwrap();
    for i in 0..3 {
        let expect = &n[i] + &((&c[i] - &n[i]) * w);
        assert!((&guided[i] - &expect).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn deterministic_and_thread_independent() {
    let model = jittered(small(Head::Categorical, None), 7);
    let cfg = scfg(300, 6);
    let a = generate(&model, &cfg).unwrap();
    let b = generate(&model, &cfg).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let c = pool.install(|| generate(&model, &cfg).unwrap());
    assert_eq!(a, c);
    // a sample does not depend on how many others are drawn
    let short = generate(&model, &SamplerConfig { n_samples: 3, ..cfg.clone() }).unwrap();
    assert_eq!(&a.codes[..3], &short.codes[..]);
    let other = generate(&model, &SamplerConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.z_final, other.z_final);
}

#[test]
fn empty_request() {
    let model = jittered(small(Head::Categorical, None), 7);
    let out = generate(&model, &scfg(0, 3)).unwrap();
    assert!(out.codes.is_empty() && out.z_final.is_empty());
    let dfm = jittered(small(Head::DiscreteToken, None), 7);
    assert!(generate(&dfm, &scfg(0, 3)).unwrap().codes.is_empty());
}

#[test]
fn oracle_transport_small() {
    let spec = DataSpec::markov(2, vec![0.5, 0.3, 0.2], vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]])
        .unwrap();
    let cb = Codebook::seeded(3, 2, 1).unwrap();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let out = euler_sample(&OracleVelocity { oracle: &oracle }, &cb, 2, &scfg(4000, 100)).unwrap();
    let mut counts = vec![0.0; 9];
    for c in &out.codes {
        counts[c.joint_index(3)] += 1.0 / 4000.0;
    }
    let exact = spec.exact_joint().unwrap();
    let tv: f64 = 0.5 * counts.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.04, "tv {tv}");
}

#[test]
fn unmask_schedule_telescopes() {
    for steps in [1usize, 2, 10, 100] {
        let mut survive = 1.0;
        for m in 0..steps {
            survive *= 1.0 - unmask_probability(m, steps);
            let expect = 1.0 - (m + 1) as f64 / steps as f64;
            assert!((survive - expect).abs() < 1e-12);
        }
    }
    // Monte Carlo: fraction unmasked after m of T steps is m / T
    let (steps, trials) = (20, 20000);
    let mut rng = EngineRng::seed_from_u64(0);
    for m in [5usize, 10, 15] {
        let mut unmasked = 0;
        for _ in 0..trials {
            if (0..m).any(|s| rng.random::<f64>() < unmask_probability(s, steps)) {
                unmasked += 1;
            }
        }
        let frac = unmasked as f64 / trials as f64;
        assert!((frac - m as f64 / steps as f64).abs() < 0.01, "m={m}: {frac}");
    }
}

#[test]
fn dfm_single_step_cold_takes_argmax() {
    let model = jittered(small(Head::DiscreteToken, None), 21);
    let logits = model.forward_tokens(&MaskedGrid::all_masked(2), 0.0, None).unwrap();
    let argmax: Vec<usize> = logits
        .0
        .outer_iter()
        .map(|r| (0..4).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap())
        .collect();
    let out = dfm_sample(&model, &SamplerConfig { tau: TAU_MIN, ..scfg(50, 1) }).unwrap();
    assert!(out.iter().all(|c| c.codes() == argmax.as_slice()));
}

#[test]
fn dfm_unmasked_positions_never_change() {
    // a model whose logits favour a code depending on the visible context
    let model = jittered(small(Head::DiscreteToken, None), 2);
    let a = dfm_sample(&model, &scfg(200, 8)).unwrap();
    assert_eq!(a, dfm_sample(&model, &scfg(200, 8)).unwrap());
    assert!(a.iter().all(|c| c.len() == 2 && c.check(4).is_ok()));
}

#[test]
fn zt_csv() {
    let cb = cb();
    let out = SampleOutput { codes: vec![CodeGrid(vec![0, 1])], z_final: vec![cb.embed(&CodeGrid(vec![0, 1])).unwrap()] };
    let mut buf = Vec::new();
    write_zt_csv(&mut buf, &out, &cb).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample,zT_norm,quant_dist");
    assert!(lines[1].ends_with(",0"));
}

#[test]
fn f32_final_step_identity() {
    let model: Model<f32> = jittered(small(Head::Categorical, None), 3).cast();
    let cfg = scfg(4, 10);
    let purr = PurrVelocity::new(&model, &cfg).unwrap();
    let mut z: Vec<LatentPoint<f32>> = (0..4).map(|i| prior(i, 0).mapv(|x| x as f32)).collect();
    integrate(&purr, &mut z, 9).unwrap();
    let t = 0.9f32;
    let probs = purr.probs(&z, t).unwrap();
    let v = purr.velocity(&z, t).unwrap();
    for ((zi, vi), p) in z.iter().zip(&v).zip(&probs) {
        let z_next = zi + &(vi * 0.1f32);
        let mu = posterior_mean(p, &model.codebook).unwrap();
        assert!((&z_next - &mu).iter().all(|d| d.abs() <= 1e-6));
    }
    let _ = Params::<f32>::zeros(&model.cfg);
}
