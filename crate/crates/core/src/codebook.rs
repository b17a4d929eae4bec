//! The frozen code embedding table and nearest-neighbour quantization.
//!
//! Code indices are zero-based throughout: a grid over `K` codes holds
//! values in `0..K`.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::scalar::Scalar;

/// A `G x E` point in embedding space (`z_0`, `z_t`, `z_1`).
pub type LatentPoint<F> = Array2<F>;

/// A length-`G` vector of zero-based code indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeGrid(pub Vec<usize>);

impl CodeGrid {
    pub fn new(codes: Vec<usize>) -> Self {
        CodeGrid(codes)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    pub fn check(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&c| c >= k) {
            Some(&index) => Err(Error::IndexOutOfRange { index, k }),
            None => Ok(()),
        }
    }

    /// Row-major cell index in `[K]^G`, position 0 most significant.
    pub fn joint_index(&self, k: usize) -> usize {
        self.0.iter().fold(0, |acc, &c| acc * k + c)
    }

    pub fn from_joint_index(mut index: usize, k: usize, g: usize) -> Self {
        let mut codes = vec![0; g];
        for slot in codes.iter_mut().rev() {
            *slot = index % k;
            index /= k;
        }
        CodeGrid(codes)
    }
}

/// `K x E` table of code embeddings. Frozen after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    embeddings: Array2<F>,
}

impl<F: Scalar> Codebook<F> {
    /// Build from an explicit table. Rows must be finite and pairwise distinct.
    pub fn from_table(embeddings: Array2<F>) -> Result<Self> {
        let (k, e) = embeddings.dim();
        if k < 2 || e < 1 {
            return Err(Error::Codebook(format!("need K >= 2 and E >= 1, got K={k}, E={e}")));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::Codebook("non-finite embedding entry".into()));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if embeddings.row(i) == embeddings.row(j) {
                    return Err(Error::Codebook(format!("duplicate rows {i} and {j}")));
                }
            }
        }
        Ok(Codebook { embeddings })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let e = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != e) {
            return Err(Error::Codebook("ragged embedding rows".into()));
        }
        let flat = rows.iter().flatten().map(|&x| F::lit(x)).collect();
        let table = Array2::from_shape_vec((k, e), flat).map_err(|e| Error::Codebook(e.to_string()))?;
        Self::from_table(table)
    }

    /// Standard normal entries, re-drawing any row that duplicates an earlier one.
    pub fn seeded(k: usize, e: usize, seed: u64) -> Result<Self> {
        if k < 2 || e < 1 {
            return Err(Error::Codebook(format!("need K >= 2 and E >= 1, got K={k}, E={e}")));
        }
        let mut rng = EngineRng::seed_from_u64(seed);
        let mut table = Array2::<F>::zeros((k, e));
        for i in 0..k {
            loop {
                for x in table.row_mut(i) {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    *x = F::lit(v);
                }
                if (0..i).all(|j| table.row(j) != table.row(i)) {
                    break;
                }
            }
        }
        Self::from_table(table)
    }

    pub fn k(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn e(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<F> {
        &self.embeddings
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, F> {
        self.embeddings.row(k)
    }

    pub fn cast<G: Scalar>(&self) -> Codebook<G> {
        Codebook { embeddings: self.embeddings.mapv(Scalar::cast) }
    }

    /// Lowest-index nearest code for a single `E`-vector.
    pub fn nearest(&self, v: ArrayView1<'_, F>) -> usize {
        let mut best = 0;
        let mut best_d = F::infinity();
        for (k, row) in self.embeddings.outer_iter().enumerate() {
            let d: F = row.iter().zip(v.iter()).map(|(&a, &b)| (b - a) * (b - a)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Per-position argmin of squared distance; ties go to the lowest index.
    pub fn quantize(&self, z: &LatentPoint<F>) -> Result<CodeGrid> {
        if z.ncols() != self.e() {
            return Err(Error::shape(format!("latent has E={}, codebook E={}", z.ncols(), self.e())));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent passed to quantize".into()));
        }
        Ok(CodeGrid(z.outer_iter().map(|row| self.nearest(row)).collect()))
    }

    /// Row-wise lookup `c -> z_1`.
    pub fn embed(&self, c: &CodeGrid) -> Result<LatentPoint<F>> {
        c.check(self.k())?;
        let mut z = Array2::zeros((c.len(), self.e()));
        for (mut row, &code) in z.outer_iter_mut().zip(c.codes()) {
            row.assign(&self.embeddings.row(code));
        }
        Ok(z)
    }

    /// Mean of all code embeddings.
    pub fn centroid(&self) -> ndarray::Array1<F> {
        self.embeddings.mean_axis(ndarray::Axis(0)).expect("K >= 2")
    }

    pub fn to_doc(&self) -> CodebookDoc {
        CodebookDoc {
            v: 1,
            k: self.k(),
            e: self.e(),
            embeddings: self.embeddings.outer_iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect(),
        }
    }

    pub fn from_doc(doc: &CodebookDoc) -> Result<Self> {
        if doc.v != 1 {
            return Err(Error::Codebook(format!("unsupported schema version {}", doc.v)));
        }
        let cb = Self::from_rows(&doc.embeddings)?;
        if cb.k() != doc.k || cb.e() != doc.e {
            return Err(Error::Codebook(format!(
                "declared K={}, E={} but table is {}x{}",
                doc.k,
                doc.e,
                cb.k(),
                cb.e()
            )));
        }
        Ok(cb)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("codebook serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk codebook document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookDoc {
    pub v: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub embeddings: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn two_codes() -> Codebook<f64> {
        Codebook::from_table(array![[0.0, 0.0], [1.0, 0.0]]).unwrap()
    }

    #[test]
    fn explicit_table_passes_through() {
        let cb = two_codes();
        assert_eq!(cb.k(), 2);
        assert_eq!(cb.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(cb.row(1).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let err = Codebook::<f64>::from_table(array![[0.0], [0.0]]).unwrap_err();
        assert!(matches!(err, Error::Codebook(_)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Codebook::<f64>::from_table(array![[0.0], [f64::NAN]]).is_err());
        assert!(Codebook::<f64>::from_table(array![[0.0]]).is_err());
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = Codebook::<f64>::seeded(8, 2, 7).unwrap();
        let b = Codebook::<f64>::seeded(8, 2, 7).unwrap();
        let bits = |cb: &Codebook<f64>| cb.embeddings().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, Codebook::<f64>::seeded(8, 2, 8).unwrap());
    }

    #[test]
    fn quantize_nearest() {
        // distances 0.82 vs 0.02
        let cb = two_codes();
        assert_eq!(cb.quantize(&array![[0.9, 0.1]]).unwrap(), CodeGrid(vec![1]));
    }

    #[test]
    fn quantize_tie_goes_low() {
        let cb = two_codes();
        assert_eq!(cb.quantize(&array![[0.5, 0.0]]).unwrap(), CodeGrid(vec![0]));
    }

    #[test]
    fn quantize_errors() {
        let cb = two_codes();
        assert!(matches!(cb.quantize(&array![[0.5]]), Err(Error::Shape(_))));
        assert!(matches!(cb.quantize(&array![[f64::INFINITY, 0.0]]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embed_lookup_and_bounds() {
        let cb = two_codes();
        assert_eq!(cb.embed(&CodeGrid(vec![1])).unwrap(), array![[1.0, 0.0]]);
        assert!(matches!(cb.embed(&CodeGrid(vec![2])), Err(Error::IndexOutOfRange { index: 2, k: 2 })));
    }

    #[test]
    fn json_round_trip() {
        let cb = Codebook::<f64>::seeded(5, 3, 1).unwrap();
        let back = Codebook::<f64>::from_json(&cb.to_json()).unwrap();
        assert_eq!(cb, back);
        assert!(cb.to_json().contains("\"v\": 1"));
    }

    #[test]
    fn joint_index_round_trip() {
        for i in 0..27 {
            let g = CodeGrid::from_joint_index(i, 3, 3);
            assert_eq!(g.joint_index(3), i);
        }
        assert_eq!(CodeGrid(vec![1, 0]).joint_index(2), 2);
    }

    proptest! {
        #[test]
        fn quantize_embed_round_trip(seed in 0u64..500, k in 2usize..12, e in 1usize..5, g in 1usize..6) {
            let cb = Codebook::<f64>::seeded(k, e, seed).unwrap();
            let codes = CodeGrid((0..g).map(|i| (i * 7 + seed as usize) % k).collect());
            prop_assert_eq!(cb.quantize(&cb.embed(&codes).unwrap()).unwrap(), codes);
        }

        #[test]
        fn quantize_translation_invariant(seed in 0u64..500, shift in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let cb = Codebook::<f64>::seeded(6, 3, seed).unwrap();
            let z = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37 + seed as f64).sin() * 2.0);
            let s = ndarray::Array1::from_vec(shift);
            let shifted_cb = Codebook::from_table(cb.embeddings() + &s).unwrap();
            let shifted_z = &z + &s;
            prop_assert_eq!(cb.quantize(&z).unwrap(), shifted_cb.quantize(&shifted_z).unwrap());
        }
    }
}
