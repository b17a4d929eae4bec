use super::*;
use crate::codebook::Codebook;
use crate::model::ModelConfig;
use crate::rng::EngineRng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn grids(v: &[&[usize]]) -> Vec<CodeGrid> {
    v.iter().map(|c| CodeGrid(c.to_vec())).collect()
}

fn random_dist(rng: &mut EngineRng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[test]
fn histogram_examples() {
    let empty = histogram(&[], 3, 2).unwrap();
    assert_eq!(empty.n, 0);
    assert!(empty.joint.as_ref().unwrap().iter().all(|&c| c == 0));
    assert!(empty.per_position.iter().all(|&c| c == 0));
    assert!(empty.joint_probs().unwrap().iter().all(|&p| p == 0.0));

    // codes {1, 1, 2} in one-based terms
    let h = histogram(&grids(&[&[0], &[0], &[1]]), 2, 1).unwrap();
    assert_eq!(h.joint.as_deref(), Some(&[2u64, 1][..]));
    assert_eq!(h.per_position.row(0).to_vec(), vec![2, 1]);

    let a = histogram(&grids(&[&[0, 1], &[2, 2], &[0, 1], &[1, 0]]), 3, 2).unwrap();
    let b = histogram(&grids(&[&[1, 0], &[0, 1], &[2, 2], &[0, 1]]), 3, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.joint.as_ref().unwrap().iter().sum::<u64>(), 4);
    for g in 0..2 {
        assert_eq!(a.per_position.row(g).sum(), 4);
    }
    assert!(matches!(histogram(&grids(&[&[0, 3]]), 3, 2), Err(Error::IndexOutOfRange { index: 3, k: 3 })));
    assert!(histogram(&grids(&[&[0]]), 3, 2).is_err());
}

#[test]
fn histogram_beyond_guard_keeps_marginals() {
    let h = histogram(&grids(&[&[0; 13]]), 2, 13).unwrap();
    assert!(h.joint.is_none());
    assert!(matches!(h.joint_probs(), Err(Error::EnumerationGuard { .. })));
    assert_eq!(h.marginal_probs(5), vec![1.0, 0.0]);
}

#[test]
fn tv_examples() {
    assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.5);
    assert!(matches!(tv_distance(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Normalization(_))));
    assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn kl_examples() {
    assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7], KL_FLOOR).unwrap(), 0.0);
    let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], KL_FLOOR).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    // q = 0 where p > 0 is floored rather than infinite
    let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0], KL_FLOOR).unwrap();
    assert!((v - 0.5 * (0.5f64.ln() - KL_FLOOR.ln()) - 0.5 * 0.5f64.ln()).abs() < 1e-12);
    assert!(kl_divergence(&[0.5, 0.4], &[0.5, 0.5], KL_FLOOR).is_err());
}

#[test]
fn kl_nonnegative_and_pinsker() {
    let mut rng = EngineRng::seed_from_u64(3);
    for i in 0..1000 {
        let n = 2 + i % 7;
        let p = random_dist(&mut rng, n);
        let q = random_dist(&mut rng, n);
        let kl = kl_divergence(&p, &q, KL_FLOOR).unwrap();
        let tv = tv_distance(&p, &q).unwrap();
        assert!(kl >= 0.0);
        assert!(tv <= (kl / 2.0).sqrt() + 1e-12);
    }
}

#[test]
fn zero_iff_equal() {
    let p = vec![0.25, 0.25, 0.5, 0.0];
    assert!(tv_distance(&p, &p).unwrap() <= 1e-9 && kl_divergence(&p, &p, KL_FLOOR).unwrap() <= 1e-9);
    let q = vec![0.25, 0.25, 0.49, 0.01];
    assert!(tv_distance(&p, &q).unwrap() > 1e-9 && kl_divergence(&p, &q, KL_FLOOR).unwrap() > 1e-9);
}

#[test]
fn entropy_values() {
    assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
}

fn markov() -> (DataSpec, Codebook<f64>) {
    let spec = DataSpec::markov(2, vec![0.6, 0.4], vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    (spec, Codebook::from_rows(&[vec![0.0, 0.0], vec![1.5, -0.5]]).unwrap())
}

#[test]
fn oracle_fidelity_is_zero() {
    let (spec, cb) = markov();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let kl = posterior_fidelity(&oracle, &oracle, &spec, &ProbeConfig { n_probes: 1000, seed: 2 }).unwrap();
    assert!(kl.abs() <= 1e-9, "{kl}");
}

/// The oracle's log-posterior, handed back through a model-shaped source.
struct LogOracle<'a>(&'a OraclePosterior);

impl PosteriorSource for LogOracle<'_> {
    fn posteriors(&self, zt: &[LatentPoint<f64>], t: &[f64]) -> Result<Vec<Array2<f64>>> {
        let logs = self.0.posteriors(zt, t)?.into_iter().map(|p| p.mapv(f64::ln));
        logs.map(|l| softmax_temp(&PosteriorLogits::new(l.mapv(|x| x.max(-700.0)))?, 1.0)).collect()
    }
}

#[test]
fn exact_log_probabilities_as_logits() {
    let (spec, cb) = markov();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let kl = posterior_fidelity(&LogOracle(&oracle), &oracle, &spec, &ProbeConfig { n_probes: 1000, seed: 4 }).unwrap();
    assert!(kl <= 1e-9, "{kl}");
}

#[test]
fn zero_init_model_on_uniform_data() {
    let spec = DataSpec::uniform(2, 3);
    let cb = Codebook::seeded(3, 2, 8).unwrap();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let model: Model<f64> = Model::init(ModelConfig::new(2, 3, 2, Head::Categorical), cb.clone(), 0).unwrap();
    // at t = 0 both are uniform
    let z: Vec<LatentPoint<f64>> = (0..5).map(|i| crate::path::sample_prior(2, 2, i)).collect();
    let t0 = vec![0.0; 5];
    for (p, q) in oracle.posteriors(&z, &t0).unwrap().iter().zip(model.posteriors(&z, &t0).unwrap()) {
        for g in 0..2 {
            assert!(kl_divergence(&p.row(g).to_vec(), &q.row(g).to_vec(), KL_FLOOR).unwrap() < 1e-15);
        }
    }
    // elsewhere the score is the mean KL(Bayes || uniform), recomputed here by hand
    let probe = ProbeConfig { n_probes: 300, seed: 1 };
    let got = posterior_fidelity(&model, &oracle, &spec, &probe).unwrap();
    let mut expect = 0.0;
    for (t, z) in probe_points(&spec, &oracle, &probe).unwrap() {
        let p = oracle.bayes_posterior(&z, t).unwrap();
        for row in p.outer_iter() {
            expect += row.iter().filter(|&&x| x > 0.0).map(|&x| x * (x * 3.0).ln()).sum::<f64>();
        }
    }
    expect /= 600.0;
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    assert!(got > 0.01);
}

#[test]
fn fidelity_rejects_other_heads() {
    let (spec, cb) = markov();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let cfm: Model<f32> = Model::init(ModelConfig::new(2, 2, 2, Head::Velocity), cb.cast(), 0).unwrap();
    assert!(matches!(posterior_fidelity(&cfm, &oracle, &spec, &ProbeConfig::default()), Err(Error::MethodMismatch { .. })));
}

#[test]
fn probes_follow_training_distribution() {
    let (spec, cb) = markov();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let pts = probe_points(&spec, &oracle, &ProbeConfig { n_probes: 4000, seed: 0 }).unwrap();
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / 4000.0;
    assert!((mean_t - 0.4995).abs() < 0.02);
    assert_eq!(pts, probe_points(&spec, &oracle, &ProbeConfig { n_probes: 4000, seed: 0 }).unwrap());
}

fn tiny_purr() -> (Model<f64>, DataSpec) {
    let spec = DataSpec::independent(vec![vec![0.7, 0.3]]).unwrap();
    let cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let mut m: Model<f64> = Model::init(ModelConfig { hidden_width: 8, ..ModelConfig::new(1, 2, 2, Head::Categorical) }, cb, 0).unwrap();
    m.params.get_mut("out.bias")[0] = 0.8;
    (m, spec)
}

#[test]
fn sweep_rows() {
    let (model, spec) = tiny_purr();
    let scfg = SamplerConfig { n_samples: 200, steps: 10, seed: 3, ..Default::default() };
    let rows = temperature_sweep(&model, &spec, &[0.9, 0.3, 0.6, 0.6], &scfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.tau).collect::<Vec<_>>(), vec![0.3, 0.6, 0.6, 0.9]);
    assert_eq!(rows[1], rows[2]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.tv_joint) && r.n == 200 && r.seed == 3));
    // a constant-logit model favouring code 0 collapses further at low temperature
    assert!(rows[0].entropy <= rows[1].entropy && rows[1].entropy <= rows[3].entropy);
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "tau,tv_joint,tv_marg,entropy,n,seed");
    assert_eq!(text.lines().count(), 5);
    assert!(temperature_sweep(&model, &spec, &[1e-5], &scfg).is_err());
}

#[test]
fn sweep_rejects_velocity_head() {
    let (_, spec) = tiny_purr();
    let cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let cfm: Model<f64> = Model::init(ModelConfig::new(1, 2, 2, Head::Velocity), cb, 0).unwrap();
    assert!(matches!(temperature_sweep(&cfm, &spec, &[1.0], &SamplerConfig::default()), Err(Error::MethodMismatch { .. })));
}

#[test]
fn schedule() {
    assert_eq!(eval_schedule(10, 20), vec![10]);
    assert_eq!(eval_schedule(10, 5), vec![5, 10]);
    assert_eq!(eval_schedule(10, 3), vec![3, 6, 9, 10]);
    assert_eq!(eval_schedule(0, 3), vec![0]);
}

fn compare_cfgs(iterations: u64) -> Vec<RunConfig> {
    let spec = DataSpec::independent(vec![vec![0.5, 0.5]]).unwrap();
    let cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    Method::ALL
        .iter()
        .map(|&m| {
            let mut c = RunConfig::new(m, spec.clone(), cb.clone());
            c.model.hidden_width = 8;
            c.optim.iterations = iterations;
            c.optim.batch_size = 4;
            c.sampler = SamplerConfig { n_samples: 50, steps: 4, ..Default::default() };
            c
        })
        .collect()
}

#[test]
fn compare_contract() {
    let cfgs = compare_cfgs(5);
    let rows = convergence_compare(&cfgs, 2).unwrap();
    assert_eq!(rows.len(), 9);
    for it in [2, 4, 5] {
        let at: Vec<Method> = rows.iter().filter(|r| r.iteration == it).map(|r| r.method).collect();
        assert_eq!(at, Method::ALL.to_vec());
    }
    assert_eq!(rows, convergence_compare(&cfgs, 2).unwrap());
    let final_only = convergence_compare(&cfgs, 50).unwrap();
    assert_eq!(final_only.len(), 3);
    assert!(final_only.iter().all(|r| r.iteration == 5 && r.wall_ms == 0));
    assert_eq!(&final_only[..], &rows[6..]);
    let mut buf = Vec::new();
    write_compare_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,iteration,tv_joint,tv_marg,wall_ms");
    assert!(text.lines().nth(1).unwrap().starts_with("purrception,2,"));
}

#[test]
fn compare_config_errors() {
    let cfgs = compare_cfgs(2);
    assert!(matches!(convergence_compare(&cfgs[..2], 1), Err(Error::Config(_))));
    let mut dup = cfgs.clone();
    dup[2] = dup[1].clone();
    assert!(convergence_compare(&dup, 1).is_err());
    let mut other_seed = cfgs.clone();
    other_seed[1].seed = 9;
    assert!(convergence_compare(&other_seed, 1).is_err());
    let mut other_data = cfgs;
    other_data[0].data = DataSpec::independent(vec![vec![0.4, 0.6]]).unwrap();
    assert!(convergence_compare(&other_data, 1).is_err());
}

#[test]
fn score_of_exact_counts() {
    let (spec, _) = markov();
    let joint = spec.exact_joint().unwrap();
    // 0.54, 0.06, 0.08, 0.32 scaled to 50 samples
    let mut samples = Vec::new();
    for (cell, &p) in joint.iter().enumerate() {
        for _ in 0..(p * 50.0).round() as usize {
            samples.push(CodeGrid::from_joint_index(cell, 2, 2));
        }
    }
    let s = score_samples(&samples, &spec).unwrap();
    assert!(s.tv_joint < 1e-12 && s.tv_marg < 1e-12);
    assert!(score_samples(&[], &spec).is_err());
}

proptest! {
    #[test]
    fn tv_is_a_bounded_symmetric_metric(seed in 0u64..1000, n in 2usize..8) {
        let mut rng = EngineRng::seed_from_u64(seed);
        let p = random_dist(&mut rng, n);
        let q = random_dist(&mut rng, n);
        let r = random_dist(&mut rng, n);
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!((pq - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(pq <= tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn histogram_is_order_invariant(codes in proptest::collection::vec((0usize..3, 0usize..3), 0..40), rot in 0usize..40) {
        let g: Vec<CodeGrid> = codes.iter().map(|&(a, b)| CodeGrid(vec![a, b])).collect();
        let mut r = g.clone();
        if !r.is_empty() {
            let k = rot % r.len();
            r.rotate_left(k);
            r.reverse();
        }
        prop_assert_eq!(histogram(&g, 3, 2).unwrap(), histogram(&r, 3, 2).unwrap());
    }
}

#[test]
fn oracle_transport_scores() {
    let (spec, cb) = markov();
    let oracle = OraclePosterior::new(&spec, &cb).unwrap();
    let s = oracle_transport(&spec, &oracle, &SamplerConfig { n_samples: 3000, steps: 100, seed: 1, ..Default::default() }).unwrap();
    assert!(s.tv_joint < 0.04, "{s:?}");
}
