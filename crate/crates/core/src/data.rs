//! Synthetic code-grid data with an exactly enumerable joint distribution,
//! and the binary dataset file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codebook::CodeGrid;
use crate::error::{Error, Result};
use crate::rng::{sample_categorical, EngineRng};

/// Largest `K^G` the exact oracle will enumerate.
pub const ENUMERATION_LIMIT: usize = 4096;

const ROW_TOL: f64 = 1e-12;
const DATASET_MAGIC: &[u8; 8] = b"VQFLOWDS";

/// Generative description of the ground-truth distribution over `[K]^G`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// Each position drawn independently from its own row (`G x K`).
    Independent { probs: Vec<Vec<f64>> },
    /// First-order chain: `init` for position 0, then `transition` rows.
    Markov { g: usize, init: Vec<f64>, transition: Vec<Vec<f64>> },
    /// Class-conditional data: class `y` has weight `class_probs[y]` and
    /// distribution `components[y]`. Components must not nest.
    Mixture { class_probs: Vec<f64>, components: Vec<DataSpec> },
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::DataSpec(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::DataSpec(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

impl DataSpec {
    pub fn independent(probs: Vec<Vec<f64>>) -> Result<Self> {
        let spec = DataSpec::Independent { probs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn markov(g: usize, init: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self> {
        let spec = DataSpec::Markov { g, init, transition };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mixture(class_probs: Vec<f64>, components: Vec<DataSpec>) -> Result<Self> {
        let spec = DataSpec::Mixture { class_probs, components };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform independent data over `K` codes at `G` positions.
    pub fn uniform(g: usize, k: usize) -> Self {
        DataSpec::Independent { probs: vec![vec![1.0 / k as f64; k]; g] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Independent { probs } => {
                if probs.is_empty() {
                    return Err(Error::DataSpec("G must be >= 1".into()));
                }
                let k = probs[0].len();
                if k < 2 {
                    return Err(Error::DataSpec("K must be >= 2".into()));
                }
                for (g, row) in probs.iter().enumerate() {
                    if row.len() != k {
                        return Err(Error::DataSpec(format!("row {g} has {} entries, expected {k}", row.len())));
                    }
                    check_row(row, &format!("position {g}"))?;
                }
            }
            DataSpec::Markov { g, init, transition } => {
                if *g == 0 {
                    return Err(Error::DataSpec("G must be >= 1".into()));
                }
                let k = init.len();
                if k < 2 {
                    return Err(Error::DataSpec("K must be >= 2".into()));
                }
                check_row(init, "initial distribution")?;
                if transition.len() != k {
                    return Err(Error::DataSpec("transition matrix must be K x K".into()));
                }
                for (i, row) in transition.iter().enumerate() {
                    if row.len() != k {
                        return Err(Error::DataSpec("transition matrix must be K x K".into()));
                    }
                    check_row(row, &format!("transition row {i}"))?;
                }
            }
            DataSpec::Mixture { class_probs, components } => {
                if components.is_empty() || components.len() != class_probs.len() {
                    return Err(Error::DataSpec("one class probability per component required".into()));
                }
                check_row(class_probs, "class probabilities")?;
                let (g, k) = (components[0].g(), components[0].k());
                for c in components {
                    if matches!(c, DataSpec::Mixture { .. }) {
                        return Err(Error::DataSpec("mixtures cannot nest".into()));
                    }
                    c.validate()?;
                    if c.g() != g || c.k() != k {
                        return Err(Error::DataSpec("mixture components disagree on G or K".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn g(&self) -> usize {
        match self {
            DataSpec::Independent { probs } => probs.len(),
            DataSpec::Markov { g, .. } => *g,
            DataSpec::Mixture { components, .. } => components[0].g(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            DataSpec::Independent { probs } => probs[0].len(),
            DataSpec::Markov { init, .. } => init.len(),
            DataSpec::Mixture { components, .. } => components[0].k(),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            DataSpec::Mixture { components, .. } => Some(components.len()),
            _ => None,
        }
    }

    /// Class-conditional component, or the spec itself when unconditional.
    pub fn component(&self, label: Option<usize>) -> Result<&DataSpec> {
        match (self, label) {
            (DataSpec::Mixture { components, .. }, Some(y)) => components
                .get(y)
                .ok_or_else(|| Error::DataSpec(format!("class {y} out of range"))),
            (_, None) => Ok(self),
            (_, Some(y)) => Err(Error::DataSpec(format!("class {y} requested from unconditional data"))),
        }
    }

    /// `K^G`, saturating.
    pub fn cells(&self) -> u128 {
        (self.k() as u128).saturating_pow(self.g() as u32)
    }

    pub fn enumerable(&self) -> bool {
        self.cells() <= ENUMERATION_LIMIT as u128
    }

    /// Draw one grid and its class label (`None` for unconditional data).
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Option<usize>, CodeGrid) {
        match self {
            DataSpec::Mixture { class_probs, components } => {
                let y = sample_categorical(rng, class_probs);
                (Some(y), components[y].sample_labeled(rng).1)
            }
            DataSpec::Independent { probs } => {
                (None, CodeGrid(probs.iter().map(|row| sample_categorical(rng, row)).collect()))
            }
            DataSpec::Markov { g, init, transition } => {
                let mut codes = Vec::with_capacity(*g);
                let mut prev = sample_categorical(rng, init);
                codes.push(prev);
                for _ in 1..*g {
                    prev = sample_categorical(rng, &transition[prev]);
                    codes.push(prev);
                }
                (None, CodeGrid(codes))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CodeGrid {
        self.sample_labeled(rng).1
    }

    /// Probability of a single grid.
    pub fn prob(&self, c: &CodeGrid) -> f64 {
        match self {
            DataSpec::Independent { probs } => probs.iter().zip(c.codes()).map(|(row, &k)| row[k]).product(),
            DataSpec::Markov { init, transition, .. } => {
                let codes = c.codes();
                let mut p = init[codes[0]];
                for w in codes.windows(2) {
                    p *= transition[w[0]][w[1]];
                }
                p
            }
            DataSpec::Mixture { class_probs, components } => {
                class_probs.iter().zip(components).map(|(w, s)| w * s.prob(c)).sum()
            }
        }
    }

    /// Exact joint over `[K]^G` in [`CodeGrid::joint_index`] order.
    pub fn exact_joint(&self) -> Result<Vec<f64>> {
        if !self.enumerable() {
            return Err(Error::EnumerationGuard { cells: self.cells(), limit: ENUMERATION_LIMIT });
        }
        let (g, k) = (self.g(), self.k());
        let cells = self.cells() as usize;
        Ok((0..cells).map(|i| self.prob(&CodeGrid::from_joint_index(i, k, g))).collect())
    }

    /// Per-position marginals `G x K`. Needs no enumeration.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        match self {
            DataSpec::Independent { probs } => probs.clone(),
            DataSpec::Markov { g, init, transition } => {
                let k = init.len();
                let mut rows = vec![init.clone()];
                for _ in 1..*g {
                    let prev = rows.last().unwrap();
                    let next = (0..k).map(|j| (0..k).map(|i| prev[i] * transition[i][j]).sum()).collect();
                    rows.push(next);
                }
                rows
            }
            DataSpec::Mixture { class_probs, components } => {
                let (g, k) = (self.g(), self.k());
                let mut out = vec![vec![0.0; k]; g];
                for (w, comp) in class_probs.iter().zip(components) {
                    for (orow, crow) in out.iter_mut().zip(comp.marginals()) {
                        for (o, c) in orow.iter_mut().zip(crow) {
                            *o += w * c;
                        }
                    }
                }
                out
            }
        }
    }

    pub fn to_doc(&self) -> DataSpecDoc {
        let mut doc = DataSpecDoc { v: Some(1), ..Default::default() };
        match self {
            DataSpec::Independent { probs } => {
                doc.kind = "independent".into();
                doc.probs = Some(probs.clone());
            }
            DataSpec::Markov { g, init, transition } => {
                doc.kind = "markov".into();
                doc.g = Some(*g);
                doc.init = Some(init.clone());
                doc.transition = Some(transition.clone());
            }
            DataSpec::Mixture { class_probs, components } => {
                doc.kind = "mixture".into();
                doc.class_probs = Some(class_probs.clone());
                doc.components = Some(components.iter().map(|c| DataSpecDoc { v: None, ..c.to_doc() }).collect());
            }
        }
        doc
    }

    pub fn from_doc(doc: &DataSpecDoc) -> Result<Self> {
        if let Some(v) = doc.v {
            if v != 1 {
                return Err(Error::DataSpec(format!("unsupported schema version {v}")));
            }
        }
        let missing = |f: &str| Error::DataSpec(format!("{} spec missing field '{f}'", doc.kind));
        let spec = match doc.kind.as_str() {
            "independent" => DataSpec::Independent { probs: doc.probs.clone().ok_or_else(|| missing("probs"))? },
            "markov" => DataSpec::Markov {
                g: doc.g.ok_or_else(|| missing("G"))?,
                init: doc.init.clone().ok_or_else(|| missing("init"))?,
                transition: doc.transition.clone().ok_or_else(|| missing("transition"))?,
            },
            "mixture" => DataSpec::Mixture {
                class_probs: doc.class_probs.clone().ok_or_else(|| missing("class_probs"))?,
                components: doc
                    .components
                    .as_ref()
                    .ok_or_else(|| missing("components"))?
                    .iter()
                    .map(DataSpec::from_doc)
                    .collect::<Result<_>>()?,
            },
            other => return Err(Error::DataSpec(format!("unknown kind '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("data spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }
}

/// JSON form of [`DataSpec`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpecDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<Vec<f64>>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub g: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<DataSpecDoc>>,
}

/// `n` i.i.d. grids, deterministic per seed.
pub fn gen_dataset(spec: &DataSpec, n: usize, seed: u64) -> Result<Vec<CodeGrid>> {
    spec.validate()?;
    let mut rng = EngineRng::seed_from_u64(seed);
    Ok((0..n).map(|_| spec.sample(&mut rng)).collect())
}

/// Write grids in the binary dataset format: magic, `n`, `G`, `K` as
/// little-endian `u32`, then `n * G` little-endian `u16` indices.
pub fn write_dataset<W: Write>(mut w: W, grids: &[CodeGrid], g: usize, k: usize) -> Result<()> {
    if k > u16::MAX as usize + 1 {
        return Err(Error::Dataset(format!("K={k} does not fit u16 indices")));
    }
    let mut buf = Vec::with_capacity(20 + grids.len() * g * 2);
    buf.extend_from_slice(DATASET_MAGIC);
    for x in [grids.len(), g, k] {
        let x = u32::try_from(x).map_err(|_| Error::Dataset("header field exceeds u32".into()))?;
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for grid in grids {
        if grid.len() != g {
            return Err(Error::Dataset(format!("grid of length {} in a G={g} dataset", grid.len())));
        }
        grid.check(k)?;
        for &c in grid.codes() {
            buf.extend_from_slice(&(c as u16).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns `(grids, G, K)`.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Vec<CodeGrid>, usize, usize)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Dataset("missing VQFLOWDS header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, g, k) = (field(0), field(1), field(2));
    let body = &bytes[20..];
    if body.len() != n * g * 2 {
        return Err(Error::Dataset(format!("expected {} payload bytes, found {}", n * g * 2, body.len())));
    }
    let codes: Vec<usize> = body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    let grids: Vec<CodeGrid> = codes.chunks(g.max(1)).take(n).map(|c| CodeGrid(c.to_vec())).collect();
    for grid in &grids {
        grid.check(k)?;
    }
    Ok((grids, g, k))
}

pub fn save_dataset(path: &Path, grids: &[CodeGrid], g: usize, k: usize) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, grids, g, k)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Vec<CodeGrid>, usize, usize)> {
    read_dataset(std::fs::File::open(path)?)
}
