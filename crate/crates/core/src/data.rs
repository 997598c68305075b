//! Core dataset types shared by every stage.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Number of classes plus optional human-readable names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    k: usize,
    class_names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::config(format!("label space needs K >= 2, got {k}")));
        }
        Ok(Self {
            k,
            class_names: None,
        })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut space = Self::new(names.len())?;
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::config("class names must be non-empty"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!("duplicate class name {name:?}")));
            }
        }
        space.class_names = Some(names);
        Ok(space)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }
}

/// N frozen embedding rows of dimension d, stored exactly as they appear on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: Array2<f32>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 || d == 0 {
            return Err(Error::shape(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { rows })
    }

    pub fn from_f64(rows: &Array2<f64>) -> Result<Self> {
        Self::new(rows.mapv(|v| v as f32))
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.rows.row(i)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: self.rows.select(ndarray::Axis(0), indices),
        }
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.rows
    }
}

/// Per-sample class confidences; every row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    rows: Array2<f32>,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

impl ConfidenceMatrix {
    pub fn new(rows: Array2<f32>) -> Result<Self> {
        for (i, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "confidence row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::numerical(format!(
                    "confidence row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn k(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.rows.row(i)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.rows
    }
}

/// N×K boolean candidate matrix, bit-packed row-major, LSB-first within each byte.
///
/// Construction does not reject empty rows so that malformed data can still be
/// inspected by [`validate_dataset`]; the PLLC reader does reject them.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CandidateMatrix {
    n: usize,
    k: usize,
    row_bytes: usize,
    bits: Vec<u8>,
}

impl std::fmt::Debug for CandidateMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CandidateMatrix")
            .field("n", &self.n)
            .field("k", &self.k)
            .finish_non_exhaustive()
    }
}

impl CandidateMatrix {
    pub fn empty(n: usize, k: usize) -> Self {
        let row_bytes = k.div_ceil(8);
        Self {
            n,
            k,
            row_bytes,
            bits: vec![0; n * row_bytes],
        }
    }

    /// Builds from per-row class lists; indices must be below `k`.
    pub fn from_rows<R: AsRef<[usize]>>(k: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::empty(rows.len(), k);
        for (i, row) in rows.iter().enumerate() {
            for &j in row.as_ref() {
                if j >= k {
                    return Err(Error::shape(format!(
                        "class {j} in row {i} is out of range for K={k}"
                    )));
                }
                m.insert(i, j);
            }
        }
        Ok(m)
    }

    pub fn from_mask(mask: &Array2<bool>) -> Self {
        let (n, k) = mask.dim();
        let mut m = Self::empty(n, k);
        for ((i, j), &b) in mask.indexed_iter() {
            if b {
                m.insert(i, j);
            }
        }
        m
    }

    /// Wraps already-packed bytes. Padding bits beyond K must be zero.
    pub fn from_packed(n: usize, k: usize, bits: Vec<u8>) -> Result<Self> {
        let row_bytes = k.div_ceil(8);
        if bits.len() != n * row_bytes {
            return Err(Error::shape(format!(
                "expected {} packed bytes, got {}",
                n * row_bytes,
                bits.len()
            )));
        }
        let pad = row_bytes * 8 - k;
        if pad > 0 {
            let mask = !(0xffu8 >> pad);
            for i in 0..n {
                if bits[i * row_bytes + row_bytes - 1] & mask != 0 {
                    return Err(Error::shape(format!(
                        "row {i} sets padding bits beyond K={k}"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            k,
            row_bytes,
            bits,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row_bytes(&self) -> usize {
        self.row_bytes
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn packed_row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.row_bytes..(i + 1) * self.row_bytes]
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.k);
        self.bits[i * self.row_bytes + j / 8] >> (j % 8) & 1 == 1
    }

    #[inline]
    pub fn insert(&mut self, i: usize, j: usize) {
        debug_assert!(i < self.n && j < self.k);
        self.bits[i * self.row_bytes + j / 8] |= 1 << (j % 8);
    }

    #[inline]
    pub fn remove(&mut self, i: usize, j: usize) {
        debug_assert!(i < self.n && j < self.k);
        self.bits[i * self.row_bytes + j / 8] &= !(1 << (j % 8));
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.packed_row(i)
            .iter()
            .map(|b| b.count_ones() as usize)
            .sum()
    }

    /// Class indices present in row `i`, ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).filter(move |&j| self.contains(i, j))
    }

    pub fn row_vec(&self, i: usize) -> Vec<usize> {
        self.row(i).collect()
    }

    pub fn row_mask(&self, i: usize) -> Vec<bool> {
        (0..self.k).map(|j| self.contains(i, j)).collect()
    }

    /// Dense B×K mask for the selected rows.
    pub fn batch_mask(&self, indices: &[usize]) -> Array2<bool> {
        Array2::from_shape_fn((indices.len(), self.k), |(b, j)| {
            self.contains(indices[b], j)
        })
    }

    pub fn to_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.n, self.k), |(i, j)| self.contains(i, j))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(indices.len() * self.row_bytes);
        for &i in indices {
            bits.extend_from_slice(self.packed_row(i));
        }
        Self {
            n: indices.len(),
            k: self.k,
            row_bytes: self.row_bytes,
            bits,
        }
    }

    pub fn empty_rows(&self) -> usize {
        (0..self.n)
            .filter(|&i| self.packed_row(i).iter().all(|&b| b == 0))
            .count()
    }

    /// True when every row of `self` is a subset of the same row in `other`.
    pub fn is_subset_of(&self, other: &CandidateMatrix) -> bool {
        self.n == other.n
            && self.k == other.k
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }
}

/// A training split: features, candidate sets, and optionally the hidden true labels.
#[derive(Debug, Clone)]
pub struct PLLDataset {
    pub space: LabelSpace,
    pub features: FeatureMatrix,
    pub candidates: CandidateMatrix,
    pub oracle_labels: Option<Vec<usize>>,
    pub class_counts: Vec<usize>,
}

pub fn count_classes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &y in labels {
        if y < k {
            counts[y] += 1;
        }
    }
    counts
}

impl PLLDataset {
    /// Checks structural agreement (N and K); content is checked by [`validate_dataset`].
    /// Class counts are derived from the oracle labels when present and zero otherwise.
    pub fn new(
        space: LabelSpace,
        features: FeatureMatrix,
        candidates: CandidateMatrix,
        oracle_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.n() != candidates.n() {
            return Err(Error::shape(format!(
                "features have {} rows but candidates have {}",
                features.n(),
                candidates.n()
            )));
        }
        if candidates.k() != space.k() {
            return Err(Error::shape(format!(
                "candidates have K={} but label space has K={}",
                candidates.k(),
                space.k()
            )));
        }
        if let Some(labels) = &oracle_labels {
            if labels.len() != features.n() {
                return Err(Error::shape(format!(
                    "{} oracle labels for {} rows",
                    labels.len(),
                    features.n()
                )));
            }
        }
        let class_counts = match &oracle_labels {
            Some(labels) => count_classes(labels, space.k()),
            None => vec![0; space.k()],
        };
        Ok(Self {
            space,
            features,
            candidates,
            oracle_labels,
            class_counts,
        })
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    /// Whether row `i` contains its oracle label; `None` without oracle labels.
    pub fn covered(&self, i: usize) -> Option<bool> {
        let y = self.oracle_labels.as_ref()?[i];
        Some(y < self.candidates.k() && self.candidates.contains(i, y))
    }

    /// Sub-dataset over `indices`, recounting classes.
    pub fn select(&self, indices: &[usize]) -> Self {
        let oracle_labels = self
            .oracle_labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect::<Vec<_>>());
        let class_counts = match &oracle_labels {
            Some(labels) => count_classes(labels, self.k()),
            None => vec![0; self.k()],
        };
        Self {
            space: self.space.clone(),
            features: self.features.select(indices),
            candidates: self.candidates.select(indices),
            oracle_labels,
            class_counts,
        }
    }
}

/// Violation counts produced by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub row_count_mismatch: bool,
    pub class_count_mismatch: bool,
    pub empty_row_count: usize,
    pub nonfinite_feature_rows: usize,
    pub label_out_of_range_count: usize,
    pub uncovered_row_count: usize,
    pub class_count_errors: usize,
    /// Fraction of rows whose oracle label is in the candidate set.
    pub covered_fraction: Option<f64>,
}

impl ValidationReport {
    pub fn is_well_formed(&self) -> bool {
        !self.row_count_mismatch
            && !self.class_count_mismatch
            && self.empty_row_count == 0
            && self.nonfinite_feature_rows == 0
            && self.label_out_of_range_count == 0
            && self.class_count_errors == 0
    }
}

/// Counts invariant violations. Never fails on content.
pub fn validate_dataset(ds: &PLLDataset) -> ValidationReport {
    let n = ds.features.n();
    let k = ds.space.k();
    let row_count_mismatch = ds.candidates.n() != n
        || ds
            .oracle_labels
            .as_ref()
            .is_some_and(|l| l.len() != ds.candidates.n());
    let class_count_mismatch = ds.candidates.k() != k || ds.class_counts.len() != k;

    let nonfinite_feature_rows = ds
        .features
        .rows()
        .outer_iter()
        .filter(|r| r.iter().any(|v| !v.is_finite()))
        .count();
    let empty_row_count = ds.candidates.empty_rows();

    let (mut label_out_of_range_count, mut uncovered_row_count, mut class_count_errors) = (0, 0, 0);
    let mut covered_fraction = None;
    if let Some(labels) = &ds.oracle_labels {
        let rows = labels.len().min(ds.candidates.n());
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                label_out_of_range_count += 1;
            } else if i < rows && (y >= ds.candidates.k() || !ds.candidates.contains(i, y)) {
                uncovered_row_count += 1;
            }
        }
        if !labels.is_empty() {
            covered_fraction = Some(
                (labels.len() - uncovered_row_count - label_out_of_range_count) as f64
                    / labels.len() as f64,
            );
        }
        let expected = count_classes(labels, k);
        class_count_errors = (0..k)
            .filter(|&j| ds.class_counts.get(j) != Some(&expected[j]))
            .count();
    }

    ValidationReport {
        row_count_mismatch,
        class_count_mismatch,
        empty_row_count,
        nonfinite_feature_rows,
        label_out_of_range_count,
        uncovered_row_count,
        class_count_errors,
        covered_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn dataset(rows: &[Vec<usize>], labels: Vec<usize>, k: usize) -> PLLDataset {
        let n = rows.len();
        let feats = FeatureMatrix::new(Array2::from_elem((n, 2), 1.0)).unwrap();
        let cands = CandidateMatrix::from_rows(k, rows).unwrap();
        PLLDataset::new(LabelSpace::new(k).unwrap(), feats, cands, Some(labels)).unwrap()
    }

    #[test]
    fn label_space_rules() {
        assert!(LabelSpace::new(1).is_err());
        assert!(LabelSpace::with_names(vec!["cat".into(), "cat".into()]).is_err());
        assert!(LabelSpace::with_names(vec!["cat".into(), String::new()]).is_err());
        assert_eq!(
            LabelSpace::with_names(vec!["cat".into(), "dog".into()])
                .unwrap()
                .k(),
            2
        );
    }

    #[test]
    fn well_formed_dataset_is_fully_covered() {
        let ds = dataset(&[vec![0, 1], vec![1], vec![0, 2]], vec![0, 1, 2], 3);
        let report = validate_dataset(&ds);
        assert!(report.is_well_formed());
        assert_eq!(report.covered_fraction, Some(1.0));
        assert_eq!(report, validate_dataset(&ds));
    }

    #[test]
    fn empty_row_is_counted() {
        let ds = dataset(&[vec![0, 1], vec![], vec![2]], vec![0, 1, 2], 3);
        let report = validate_dataset(&ds);
        assert_eq!(report.empty_row_count, 1);
        assert!(!report.is_well_formed());
    }

    #[test]
    fn covered_fraction_counts_uncovered_rows() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let y = i % 4;
            labels.push(y);
            rows.push(if i < 3 {
                vec![(y + 1) % 4]
            } else {
                vec![y, (y + 2) % 4]
            });
        }
        let report = validate_dataset(&dataset(&rows, labels, 4));
        assert_eq!(report.uncovered_row_count, 3);
        assert_eq!(report.covered_fraction, Some(0.97));
    }

    #[test]
    fn stale_class_counts_are_reported() {
        let mut ds = dataset(&[vec![0], vec![1]], vec![0, 1], 2);
        ds.class_counts = vec![2, 0];
        assert_eq!(validate_dataset(&ds).class_count_errors, 2);
    }

    #[test]
    fn rejects_nonfinite_features() {
        assert!(FeatureMatrix::new(array![[1.0, f32::NAN]]).is_err());
        assert!(FeatureMatrix::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn confidence_rows_must_be_on_simplex() {
        assert!(ConfidenceMatrix::new(array![[0.5, 0.5], [0.2, 0.8]]).is_ok());
        assert!(ConfidenceMatrix::new(array![[0.5, 0.6]]).is_err());
        assert!(ConfidenceMatrix::new(array![[1.5, -0.5]]).is_err());
    }

    #[test]
    fn packed_layout_is_lsb_first() {
        let m = CandidateMatrix::from_rows(10, &[vec![0, 3, 7, 9]]).unwrap();
        assert_eq!(m.packed_row(0), &[0x89, 0x02]);
        let full = CandidateMatrix::from_rows(8, &[(0..8).collect::<Vec<_>>()]).unwrap();
        assert_eq!(full.packed_row(0), &[0xff]);
        assert!(CandidateMatrix::from_packed(1, 10, vec![0x01, 0x04]).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(k in 1usize..40, n in 1usize..20, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0, 0);
            let mask = Array2::from_shape_fn((n, k), |_| rng.random_bool(0.5));
            let packed = CandidateMatrix::from_mask(&mask);
            prop_assert_eq!(packed.to_mask(), mask.clone());
            let reparsed = CandidateMatrix::from_packed(n, k, packed.packed().to_vec()).unwrap();
            prop_assert_eq!(reparsed, packed);
        }
    }
}
