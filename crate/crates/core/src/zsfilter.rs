//! Zero-shot confidences and top-k candidate filtering.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateMatrix, ConfidenceMatrix, FeatureMatrix};
use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// What to keep when S_i and the top-k classes do not intersect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The candidate with the highest confidence.
    #[default]
    KeepArgmaxInS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub k: usize,
    #[serde(default)]
    pub fallback: Fallback,
}

impl FilterSpec {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            fallback: Fallback::default(),
        }
    }

    /// k = ⌊K/2⌋ (at least 1).
    pub fn half(num_classes: usize) -> Self {
        Self::new((num_classes / 2).max(1))
    }
}

fn unit_rows(m: &FeatureMatrix, what: &str) -> Result<Array2<f64>> {
    let mut x = m.to_f64();
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let n = math::norm(row.view());
        if n == 0.0 {
            return Err(Error::numerical(format!("zero vector in {what} row {i}")));
        }
        row /= n;
    }
    Ok(x)
}

/// z_i = softmax(cos(x_i, t_j) / temperature) over the K text embeddings.
pub fn zeroshot_confidence(
    image: &FeatureMatrix,
    text: &FeatureMatrix,
    temperature: f64,
) -> Result<ConfidenceMatrix> {
    if image.d() != text.d() {
        return Err(Error::shape(format!(
            "image features have d={} but text features have d={}",
            image.d(),
            text.d()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let img = unit_rows(image, "image feature")?;
    let txt = unit_rows(text, "text feature")?;
    let cos = img.dot(&txt.t());
    let rows: Vec<Vec<f32>> = (0..cos.nrows())
        .into_par_iter()
        .map(|i| {
            math::softmax_row((&cos.row(i) / temperature).view())
                .iter()
                .map(|&p| p as f32)
                .collect()
        })
        .collect();
    let k = text.n();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    ConfidenceMatrix::new(Array2::from_shape_vec((image.n(), k), flat).expect("row lengths are K"))
}

/// Classes ranked by descending confidence, ties by smaller index.
pub fn confidence_ranking(z: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of class `j` in row `z` under [`confidence_ranking`] order.
pub fn confidence_rank(z: &[f32], j: usize) -> usize {
    confidence_ranking(z)
        .iter()
        .position(|&c| c == j)
        .expect("class in range")
        + 1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub candidates: CandidateMatrix,
    /// Rows where S_i ∩ top-k was empty.
    pub fallback_rows: usize,
}

/// Ŝ_i = S_i ∩ argtop_k(z_i), or {argmax_{j∈S_i} z_ij} when that is empty.
pub fn filter_topk(
    candidates: &CandidateMatrix,
    conf: &ConfidenceMatrix,
    spec: &FilterSpec,
) -> Result<CandidateMatrix> {
    Ok(filter_topk_outcome(candidates, conf, spec)?.candidates)
}

pub fn filter_topk_outcome(
    candidates: &CandidateMatrix,
    conf: &ConfidenceMatrix,
    spec: &FilterSpec,
) -> Result<FilterOutcome> {
    let k = candidates.k();
    if spec.k < 1 {
        return Err(Error::config("filter k must be >= 1"));
    }
    if spec.k > k {
        return Err(Error::config(format!("filter k={} exceeds K={k}", spec.k)));
    }
    if conf.n() != candidates.n() || conf.k() != k {
        return Err(Error::shape(format!(
            "confidences are {}x{} but candidates are {}x{k}",
            conf.n(),
            conf.k(),
            candidates.n()
        )));
    }

    let rows: Vec<(Vec<usize>, bool)> = (0..candidates.n())
        .into_par_iter()
        .map(|i| {
            let z = conf.row(i);
            let z = z.as_slice().expect("standard layout");
            let kept: Vec<usize> = confidence_ranking(z)
                .into_iter()
                .take(spec.k)
                .filter(|&j| candidates.contains(i, j))
                .collect();
            if !kept.is_empty() {
                return (kept, false);
            }
            let best = candidates
                .row(i)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if z[b] >= z[j] => Some(b),
                    _ => Some(j),
                });
            (best.into_iter().collect(), true)
        })
        .collect();

    let mut out = CandidateMatrix::empty(candidates.n(), k);
    let mut fallback_rows = 0;
    for (i, (row, fell_back)) in rows.into_iter().enumerate() {
        fallback_rows += usize::from(fell_back);
        for j in row {
            out.insert(i, j);
        }
    }
    Ok(FilterOutcome {
        candidates: out,
        fallback_rows,
    })
}

/// Candidate-set cardinality summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// Fraction of rows containing the oracle label.
    pub coverage: Option<f64>,
}

pub fn candidate_stats(candidates: &CandidateMatrix, oracle: Option<&[usize]>) -> SizeStats {
    let n = candidates.n();
    let sizes: Vec<usize> = (0..n).map(|i| candidates.row_len(i)).collect();
    let coverage = oracle.filter(|l| l.len() == n && n > 0).map(|labels| {
        labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| y < candidates.k() && candidates.contains(i, y))
            .count() as f64
            / n as f64
    });
    SizeStats {
        mean: if n == 0 {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / n as f64
        },
        min: sizes.iter().copied().min().unwrap_or(0),
        max: sizes.iter().copied().max().unwrap_or(0),
        coverage,
    }
}
