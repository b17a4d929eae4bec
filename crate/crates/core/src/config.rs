//! The run configuration document: one JSON file with sections
//! `{method, model, optim, data, codebook, sampler, logging, seed}`.
//!
//! Unknown keys are rejected. `--set key=value` overrides are applied to the
//! parsed JSON tree before it is typed, so they win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codebook::{Codebook, CodebookDoc};
use crate::data::{DataSpec, DataSpecDoc};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampling::SamplerConfig;
use crate::training::{Method, OptimConfig};

fn d_width() -> usize {
    256
}
fn d_layers() -> usize {
    2
}
fn d_time() -> usize {
    16
}
fn d_class() -> usize {
    16
}
fn d_drop() -> f64 {
    0.1
}

/// Architecture knobs. `G`, `K`, `E`, the head and the class count follow
/// from the data, codebook and method sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_width")]
    pub hidden_width: usize,
    #[serde(default = "d_layers")]
    pub hidden_layers: usize,
    #[serde(default = "d_time")]
    pub time_features: usize,
    #[serde(default = "d_class")]
    pub class_features: usize,
    #[serde(default = "d_drop")]
    pub class_drop_prob: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_width: d_width(),
            hidden_layers: d_layers(),
            time_features: d_time(),
            class_features: d_class(),
            class_drop_prob: d_drop(),
        }
    }
}

/// Either an inline table, a seeded draw, or a path to a codebook document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl CodebookSection {
    pub fn resolve(&self, base: &Path) -> Result<Codebook<f64>> {
        match (&self.embeddings, &self.path, self.seed) {
            (Some(rows), None, None) => {
                let cb = Codebook::from_rows(rows)?;
                if self.k.is_some_and(|k| k != cb.k()) || self.e.is_some_and(|e| e != cb.e()) {
                    return Err(Error::Config("codebook K/E disagree with the embedding table".into()));
                }
                Ok(cb)
            }
            (None, Some(p), None) => {
                let full = if p.is_absolute() { p.clone() } else { base.join(p) };
                if !full.exists() {
                    return Err(Error::Config(format!("codebook file {} does not exist", full.display())));
                }
                Codebook::load(&full)
            }
            (None, None, Some(seed)) => match (self.k, self.e) {
                (Some(k), Some(e)) => Codebook::seeded(k, e, seed),
                _ => Err(Error::Config("seeded codebook needs K and E".into())),
            },
            _ => Err(Error::Config("codebook needs exactly one of: embeddings, path, seed".into())),
        }
    }
}

fn d_log_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    /// Append a metrics row after every `log_every` iterations.
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// Write an intermediate checkpoint every `ckpt_every` iterations.
    #[serde(default)]
    pub ckpt_every: Option<u64>,
    /// Record real elapsed milliseconds in CSV outputs. Off keeps outputs
    /// byte-reproducible; the column then reads 0.
    #[serde(default)]
    pub wall_clock: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig { log_every: d_log_every(), ckpt_every: None, wall_clock: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    method: Method,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    optim: OptimConfig,
    data: DataSpecDoc,
    codebook: CodebookSection,
    #[serde(default)]
    sampler: Option<SamplerConfig>,
    #[serde(default)]
    logging: LoggingConfig,
    #[serde(default)]
    seed: u64,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub model: ModelSection,
    pub optim: OptimConfig,
    pub data: DataSpec,
    pub codebook: Codebook<f64>,
    pub sampler: SamplerConfig,
    pub logging: LoggingConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: Method, data: DataSpec, codebook: Codebook<f64>) -> Self {
        RunConfig {
            method,
            model: ModelSection::default(),
            optim: OptimConfig::default(),
            data,
            codebook,
            sampler: SamplerConfig::default(),
            logging: LoggingConfig::default(),
            seed: 0,
        }
    }

    /// Resolve a JSON tree; relative paths are taken from `base`.
    pub fn from_value(value: Value, base: &Path) -> Result<Self> {
        let raw: RawRunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        let data = DataSpec::from_doc(&raw.data)?;
        let codebook = raw.codebook.resolve(base)?;
        let cfg = RunConfig {
            method: raw.method,
            model: raw.model,
            optim: raw.optim,
            data,
            codebook,
            sampler: raw.sampler.unwrap_or_default(),
            logging: raw.logging,
            seed: raw.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        Self::from_value(value, base)
    }

    /// Read a config file, apply `key=value` overrides, resolve.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed JSON in {}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.sampler.validate()?;
        if self.data.k() != self.codebook.k() {
            return Err(Error::Config(format!(
                "data has K={} but the codebook has K={}",
                self.data.k(),
                self.codebook.k()
            )));
        }
        if self.logging.log_every == 0 || self.logging.ckpt_every == Some(0) {
            return Err(Error::Config("log_every and ckpt_every must be >= 1".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            g: self.data.g(),
            k: self.data.k(),
            e: self.codebook.e(),
            hidden_width: self.model.hidden_width,
            hidden_layers: self.model.hidden_layers,
            head: self.method.head(),
            num_classes: self.data.num_classes(),
            time_features: self.model.time_features,
            class_features: self.model.class_features,
            class_drop_prob: self.model.class_drop_prob,
        }
    }

    /// Canonical JSON of the fields that determine a trained model.
    pub fn hash_input(&self) -> Value {
        hash_input(self.method, &self.model_config(), &self.optim, &self.data, &self.codebook)
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.hash_input().to_string().as_bytes())
    }

    pub fn to_value(&self) -> Value {
        let raw = RawRunConfig {
            method: self.method,
            model: self.model.clone(),
            optim: self.optim.clone(),
            data: self.data.to_doc(),
            codebook: CodebookSection { embeddings: Some(self.codebook.to_doc().embeddings), ..Default::default() },
            sampler: Some(self.sampler.clone()),
            logging: self.logging.clone(),
            seed: self.seed,
        };
        serde_json::to_value(raw).expect("run config serializes")
    }
}

pub(crate) fn hash_input(
    method: Method,
    model: &ModelConfig,
    optim: &OptimConfig,
    data: &DataSpec,
    codebook: &Codebook<f64>,
) -> Value {
    let cb: CodebookDoc = codebook.to_doc();
    serde_json::json!({
        "method": method,
        "model": model,
        "optim": optim,
        "data": data.to_doc(),
        "codebook": cb,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Apply `a.b.c=value`. The value is parsed as JSON when possible, otherwise
/// taken as a string. Intermediate objects are created as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
