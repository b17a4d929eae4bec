//! Binary checkpoint: the magic `PURRCKPT`, a little-endian `u32` header
//! length, a JSON header, then the little-endian `f32` arrays listed in the
//! header manifest (params, ema, adam_m, adam_v).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamState, OptimConfig};
use super::Method;
use crate::codebook::{Codebook, CodebookDoc};
use crate::config::{hash_input, sha256_hex};
use crate::data::{DataSpec, DataSpecDoc};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::path::OraclePosterior;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PURRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ARRAYS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    method: Method,
    model: ModelConfig,
    optim: OptimConfig,
    data: DataSpecDoc,
    codebook: CodebookDoc,
    seed: u64,
    iteration: u64,
    adam_step: u64,
    config_hash: String,
    payload_sha256: String,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataSpec,
    pub codebook: Codebook<f64>,
    pub seed: u64,
    pub iteration: u64,
    pub params: Params<f32>,
    pub ema: Params<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: Method,
        model: ModelConfig,
        optim: OptimConfig,
        data: DataSpec,
        codebook: Codebook<f64>,
        seed: u64,
        iteration: u64,
        params: Params<f32>,
        ema: Params<f32>,
        adam: AdamState<f32>,
    ) -> Self {
        Checkpoint { method, model, optim, data, codebook, seed, iteration, params, ema, adam }
    }

    pub fn config_hash(&self) -> String {
        let v = hash_input(self.method, &self.model, &self.optim, &self.data, &self.codebook);
        sha256_hex(v.to_string().as_bytes())
    }

    /// Fail unless this checkpoint was trained with `expected`.
    pub fn expect_method(&self, expected: Method) -> Result<()> {
        if self.method != expected {
            return Err(Error::MethodMismatch { expected: expected.to_string(), found: self.method.to_string() });
        }
        Ok(())
    }

    /// The inference model: EMA parameters in the requested precision.
    pub fn ema_model<F: Scalar>(&self) -> Result<Model<F>> {
        Model::new(self.model.clone(), self.ema.cast(), self.codebook.cast())
    }

    /// The raw (non-EMA) model.
    pub fn raw_model<F: Scalar>(&self) -> Result<Model<F>> {
        Model::new(self.model.clone(), self.params.cast(), self.codebook.cast())
    }

    pub fn oracle(&self) -> Result<OraclePosterior> {
        OraclePosterior::new(&self.data, &self.codebook)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.ema.len() != n || self.adam.m.len() != n || self.adam.v.len() != n {
            return Err(Error::Checkpoint("array lengths disagree".into()));
        }
        let mut payload = Vec::with_capacity(16 * n);
        for arr in [self.params.values(), self.ema.values(), &self.adam.m, &self.adam.v] {
            for v in arr {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            method: self.method,
            model: self.model.clone(),
            optim: self.optim.clone(),
            data: self.data.to_doc(),
            codebook: self.codebook.to_doc(),
            seed: self.seed,
            iteration: self.iteration,
            adam_step: self.adam.step,
            config_hash: self.config_hash(),
            payload_sha256: sha256_hex(&payload),
            arrays: ARRAYS.iter().map(|a| ArrayEntry { name: a.to_string(), len: n }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 {
            return Err(err("truncated file".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(err("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("malformed header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(err(format!("version {} unsupported (expected {CHECKPOINT_VERSION})", header.version)));
        }
        let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
        if names != ARRAYS {
            return Err(err(format!("unexpected array manifest {names:?}")));
        }
        let n = header.arrays[0].len;
        if header.arrays.iter().any(|a| a.len != n) {
            return Err(err("array lengths disagree".into()));
        }
        let payload = &body[hlen..];
        if payload.len() < 16 * n {
            return Err(err(format!("truncated payload: {} of {} bytes", payload.len(), 16 * n)));
        }
        if payload.len() > 16 * n {
            return Err(err("trailing bytes after payload".into()));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(err("payload hash mismatch".into()));
        }
        let floats: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut arrays = floats.chunks_exact(n.max(1)).map(|c| c.to_vec());
        let mut next = || if n == 0 { Vec::new() } else { arrays.next().expect("four arrays") };
        let (params, ema, m, v) = (next(), next(), next(), next());

        let ckpt = Checkpoint {
            method: header.method,
            params: Params::from_values(&header.model, params)?,
            ema: Params::from_values(&header.model, ema)?,
            adam: AdamState { m, v, step: header.adam_step },
            model: header.model,
            optim: header.optim,
            data: DataSpec::from_doc(&header.data)?,
            codebook: Codebook::from_doc(&header.codebook)?,
            seed: header.seed,
            iteration: header.iteration,
        };
        if ckpt.config_hash() != header.config_hash {
            return Err(err("config hash mismatch".into()));
        }
        if ckpt.model.head != ckpt.method.head() {
            return Err(err(format!("{:?} head stored under method {}", ckpt.model.head, ckpt.method)));
        }
        Ok(ckpt)
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
