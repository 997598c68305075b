//! Per-objective mutable state and its update rules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::CandidateMatrix;
use crate::error::{Error, Result};
use crate::math::{self, PROB_FLOOR};

/// PRODEN confidence update: w_ij = p_ij / Σ_{j'∈S_i} p_ij' on S_i, zero elsewhere.
/// Rows whose candidate mass underflows fall back to uniform over S_i; the
/// second value counts those rows.
pub fn proden_update(
    probs: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> (Array2<f64>, usize) {
    let mut w = Array2::zeros(probs.raw_dim());
    let mut warnings = 0;
    for ((p, m), mut row) in probs
        .outer_iter()
        .zip(mask.outer_iter())
        .zip(w.outer_iter_mut())
    {
        let mass: f64 = p
            .iter()
            .zip(m)
            .filter(|(_, &mj)| mj)
            .map(|(&pj, _)| pj)
            .sum();
        if mass < PROB_FLOOR || !mass.is_finite() {
            warnings += 1;
            let size = m.iter().filter(|&&mj| mj).count() as f64;
            row.zip_mut_with(&m, |w, &mj| *w = if mj { 1.0 / size } else { 0.0 });
        } else {
            for j in 0..p.len() {
                if m[j] {
                    row[j] = p[j] / mass;
                }
            }
        }
    }
    (w, warnings)
}

/// Uniform weights over each candidate set.
pub fn uniform_weights(candidates: &CandidateMatrix) -> Array2<f64> {
    let mask = candidates.to_mask();
    let (w, _) = proden_update(Array2::from_elem(mask.raw_dim(), 1.0).view(), mask.view());
    w
}

/// Momentum feature prototype and the class prior read off it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordsState {
    pub prototype: Option<Array1<f64>>,
    pub prior: Array1<f64>,
}

impl RecordsState {
    pub fn new(k: usize) -> Self {
        Self {
            prototype: None,
            prior: Array1::from_elem(k, 1.0 / k as f64),
        }
    }
}

/// f̄ ← m·f̄ + (1−m)·mean(batch); π̂ ← softmax(classifier_logits(f̄)).
/// The first call sets f̄ to the batch mean.
pub fn records_update<F>(
    state: &mut RecordsState,
    batch_features: ArrayView2<'_, f64>,
    m: f64,
    classifier_logits: F,
) -> Result<()>
where
    F: Fn(ArrayView1<'_, f64>) -> Result<Array1<f64>>,
{
    if !(0.0..1.0).contains(&m) {
        return Err(Error::config(format!(
            "RECORDS momentum must lie in [0, 1), got {m}"
        )));
    }
    let mean = batch_features
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::shape("empty feature batch"))?;
    let next = match state.prototype.take() {
        Some(prev) => &prev * m + &mean * (1.0 - m),
        None => mean,
    };
    let logits = classifier_logits(next.view())?;
    if logits.len() != state.prior.len() {
        return Err(Error::shape(
            "classifier logits do not match the prior length",
        ));
    }
    state.prior = math::softmax_row(logits.view());
    state.prototype = Some(next);
    Ok(())
}

/// logit'_j = logit_j − τ·log π̂_j with π̂ clamped at 1e-8.
pub fn records_debias(
    logits: ArrayView2<'_, f64>,
    prior: ArrayView1<'_, f64>,
    tau: f64,
) -> Array2<f64> {
    let shift = prior.mapv(|p| tau * p.max(1e-8).ln());
    &logits - &shift
}

pub const POP_MAX_THRESHOLD: f64 = 0.95;

/// Removes j from the working set S_i when p_ij < θ·max_{j'∈S_i} p_ij', with
/// θ = min(purge_rate·epoch, 0.95). Only shrinks; a row never drops below one
/// label. Returns the number of labels removed.
pub fn pop_purify(
    working: &mut CandidateMatrix,
    probs: ArrayView2<'_, f64>,
    epoch: usize,
    purge_rate: f64,
) -> Result<usize> {
    if !(purge_rate > 0.0 && purge_rate < 1.0) {
        return Err(Error::config(format!(
            "POP purge_rate must lie in (0, 1), got {purge_rate}"
        )));
    }
    if probs.dim() != (working.n(), working.k()) {
        return Err(Error::shape(
            "POP probabilities must cover every training row",
        ));
    }
    let theta = (purge_rate * epoch as f64).min(POP_MAX_THRESHOLD);
    if theta <= 0.0 {
        return Ok(0);
    }
    let mut removed = 0;
    for i in 0..working.n() {
        let members = working.row_vec(i);
        if members.len() <= 1 {
            continue;
        }
        let best = members
            .iter()
            .map(|&j| probs[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut left = members.len();
        for &j in &members {
            if left > 1 && probs[[i, j]] < theta * best {
                working.remove(i, j);
                left -= 1;
                removed += 1;
            }
        }
    }
    Ok(removed)
}

/// Mutable training state for whichever objective is active.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveState {
    /// PRODEN confidence rows (N×K).
    pub proden_weights: Option<Array2<f64>>,
    pub records: Option<RecordsState>,
    /// SoLar class-distribution estimate r.
    pub solar_dist: Option<Array1<f64>>,
    /// POP working candidate sets.
    pub pop_sets: Option<CandidateMatrix>,
}
