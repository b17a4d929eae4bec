use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vqflow::config::{apply_override, RunConfig};
use vqflow::data::save_dataset;
use vqflow::eval::{
    convergence_compare, oracle_transport, posterior_fidelity, score_samples, temperature_sweep, write_compare_csv,
    write_sweep_csv, ProbeConfig,
};
use vqflow::sampling::{generate, write_zt_csv, SamplerConfig};
use vqflow::training::{checkpoint_path, write_metrics_csv, Checkpoint, Method, Trainer};
use vqflow::{Error, OraclePosterior, Result};

use crate::{Command, Common};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalAbort { .. } | Error::SamplerDiverged { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train { config, out, common } => train(&config, &out, &common),
        Command::Sample { ckpt, out, config, method, zt_csv, common } => {
            sample(&ckpt, &out, config.as_deref(), method.as_deref(), zt_csv, &common)
        }
        Command::Eval { ckpt, out, config, oracle, probes, common } => {
            eval(ckpt.as_deref(), &out, config.as_deref(), oracle, probes, &common)
        }
        Command::Sweep { ckpt, out, config, taus, common } => sweep(&ckpt, &out, config.as_deref(), &taus, &common),
        Command::Compare { config, out, eval_every, common } => compare(&config, &out, eval_every, &common),
        Command::OracleCheck { config, steps, n, tol, out, common } => {
            oracle_check(&config, steps, n, tol, out.as_deref(), &common)
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed JSON in {}: {e}", path.display())))
}

/// File, then `--set` in order, then `--seed`.
fn load_run_config(path: &Path, common: &Common, defaults: &[(&str, Value)]) -> Result<RunConfig> {
    let mut value = read_json(path)?;
    if let Some(obj) = value.as_object_mut() {
        for (k, v) in defaults {
            obj.entry(k.to_string()).or_insert_with(|| v.clone());
        }
    }
    for o in &common.set {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = common.seed {
        value["seed"] = json!(seed);
    }
    RunConfig::from_value(value, path.parent().unwrap_or(Path::new(".")))
}

/// The sampler section from an optional run config, with `--set sampler.*`
/// overrides and `--seed` applied.
fn sampler_config(config: Option<&Path>, common: &Common) -> Result<SamplerConfig> {
    let mut root = match config {
        Some(p) => {
            let v = read_json(p)?;
            json!({ "sampler": v.get("sampler").cloned().unwrap_or_else(|| json!({})) })
        }
        None => json!({ "sampler": {} }),
    };
    for o in &common.set {
        if !o.starts_with("sampler.") {
            return Err(Error::Config(format!("override '{o}' must address the sampler section here")));
        }
        apply_override(&mut root, o)?;
    }
    if let Some(seed) = common.seed {
        root["sampler"]["seed"] = json!(seed);
    }
    let cfg: SamplerConfig =
        serde_json::from_value(root["sampler"].take()).map_err(|e| Error::Config(format!("sampler: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn train(config: &Path, out: &Path, common: &Common) -> Result<u8> {
    let cfg = load_run_config(config, common, &[])?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.resolved.json"), &cfg.to_value())?;
    let mut tr = Trainer::new(&cfg)?;
    let result = tr.run_with_checkpoints(cfg.logging.ckpt_every, Some(out));
    let mut w = create(&out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &tr.metrics)?;
    w.flush()?;
    result?;
    tr.checkpoint().save(&checkpoint_path(out, None))?;
    println!("trained {} for {} iterations -> {}", cfg.method, tr.iteration, out.display());
    Ok(0)
}

fn parse_method(s: &str) -> Result<Method> {
    serde_json::from_value(json!(s)).map_err(|_| Error::Config(format!("unknown method '{s}'")))
}

fn sample(
    ckpt: &Path,
    out: &Path,
    config: Option<&Path>,
    method: Option<&str>,
    zt_csv: bool,
    common: &Common,
) -> Result<u8> {
    let scfg = sampler_config(config, common)?;
    let ck = Checkpoint::load(ckpt)?;
    if let Some(m) = method {
        ck.expect_method(parse_method(m)?)?;
    }
    let model = ck.ema_model::<f32>()?;
    let samples = generate(&model, &scfg)?;
    fs::create_dir_all(out)?;
    save_dataset(&out.join("samples.bin"), &samples.codes, ck.model.g, ck.model.k)?;
    if zt_csv && ck.method != Method::Dfm {
        let mut w = create(&out.join("zT.csv"))?;
        write_zt_csv(&mut w, &samples, &model.codebook)?;
        w.flush()?;
    }
    let sidecar = json!({
        "method": ck.method,
        "checkpoint_iteration": ck.iteration,
        "config_hash": ck.config_hash(),
        "sampler": scfg,
    });
    write_json(&out.join("samples.json"), &sidecar)?;
    println!("wrote {} samples -> {}", samples.codes.len(), out.display());
    Ok(0)
}

fn eval(
    ckpt: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    use_oracle: bool,
    probes: usize,
    common: &Common,
) -> Result<u8> {
    let seed = common.seed.unwrap_or(0);
    let probe = ProbeConfig { n_probes: probes, seed };
    let report = if use_oracle {
        let path = config.ok_or_else(|| Error::Config("--oracle needs --config".into()))?;
        let cfg = load_run_config(path, common, &[("method", json!("purrception"))])?;
        let oracle = OraclePosterior::new(&cfg.data, &cfg.codebook)?;
        let kl = posterior_fidelity(&oracle, &oracle, &cfg.data, &probe)?;
        json!({ "source": "oracle", "posterior_kl": kl, "n_probes": probes, "seed": seed })
    } else {
        let path = ckpt.ok_or_else(|| Error::Config("eval needs --ckpt or --oracle".into()))?;
        let ck = Checkpoint::load(path)?;
        let scfg = sampler_config(config, common)?;
        let model = ck.ema_model::<f32>()?;
        let oracle = ck.oracle()?;
        let kl = match ck.method {
            Method::Purrception => Some(posterior_fidelity(&model, &oracle, &ck.data, &probe)?),
            _ => None,
        };
        let samples = generate(&model, &scfg)?;
        let s = score_samples(&samples.codes, &ck.data)?;
        json!({
            "source": "checkpoint",
            "config_hash": ck.config_hash(),
            "method": ck.method,
            "iteration": ck.iteration,
            "posterior_kl": kl,
            "n_probes": probes,
            "tv_joint": s.tv_joint,
            "tv_marg": s.tv_marg,
            "entropy": s.entropy,
            "sampler": scfg,
            "seed": seed,
        })
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(0)
}

fn parse_taus(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad temperature '{t}'"))))
        .collect()
}

fn sweep(ckpt: &Path, out: &Path, config: Option<&Path>, taus: &str, common: &Common) -> Result<u8> {
    let taus = parse_taus(taus)?;
    let scfg = sampler_config(config, common)?;
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.ema_model::<f32>()?;
    let rows = temperature_sweep(&model, &ck.data, &taus, &scfg)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("sweep.csv"))?;
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    for r in &rows {
        println!("tau {:.3}: tv_joint {:.4} entropy {:.4}", r.tau, r.tv_joint, r.entropy);
    }
    Ok(0)
}

fn compare(configs: &[PathBuf], out: &Path, eval_every: u64, common: &Common) -> Result<u8> {
    let cfgs: Vec<RunConfig> = configs.iter().map(|p| load_run_config(p, common, &[])).collect::<Result<_>>()?;
    let rows = convergence_compare(&cfgs, eval_every)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("compare.csv"))?;
    write_compare_csv(&mut w, &rows)?;
    w.flush()?;
    for r in rows.iter().filter(|r| r.iteration == cfgs[0].optim.iterations) {
        println!("{}: tv_joint {:.4}", r.method, r.tv_joint);
    }
    Ok(0)
}

fn oracle_check(
    config: &Path,
    steps: Option<usize>,
    n: Option<usize>,
    tol: f64,
    out: Option<&Path>,
    common: &Common,
) -> Result<u8> {
    let cfg = load_run_config(config, common, &[("method", json!("purrception"))])?;
    let mut scfg = cfg.sampler.clone();
    scfg.steps = steps.unwrap_or(scfg.steps);
    scfg.n_samples = n.unwrap_or(scfg.n_samples);
    scfg.seed = common.seed.unwrap_or(scfg.seed);
    scfg.validate()?;
    let oracle = OraclePosterior::new(&cfg.data, &cfg.codebook)?;
    let s = oracle_transport(&cfg.data, &oracle, &scfg)?;
    let pass = s.tv_joint <= tol;
    println!(
        "oracle transport: T={} n={} tv_joint={:.5} tv_marg={:.5} tol={} {}",
        scfg.steps,
        scfg.n_samples,
        s.tv_joint,
        s.tv_marg,
        tol,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let report = json!({
            "steps": scfg.steps,
            "n_samples": scfg.n_samples,
            "seed": scfg.seed,
            "tv_joint": s.tv_joint,
            "tv_marg": s.tv_marg,
            "tol": tol,
            "pass": pass,
        });
        write_json(&out.join("oracle_check.json"), &report)?;
    }
    Ok(if pass { 0 } else { 1 })
}
