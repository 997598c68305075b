//! Candidate-set generation from oracle labels, plus long-tailed subsampling.
//!
//! Each generator draws row `i` from its own seeded stream, so the output is a
//! pure function of `(labels, parameters, seed)` regardless of evaluation order.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateMatrix, PLLDataset};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, domain};

/// How false-positive labels enter the candidate sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform over all subsets of the K-1 false labels.
    Uss,
    /// Each false label independently with probability `eta`.
    Fps { eta: f64 },
    /// True label plus the auxiliary model's top ⌈top_fraction·K⌉ classes.
    InstanceDependent {
        #[serde(default = "default_top_fraction")]
        top_fraction: f64,
    },
}

fn default_top_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    #[serde(flatten)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::config(format!(
            "candidate generation needs K >= 2, got {k}"
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::config(format!(
            "label {y} at row {i} is out of range for K={k}"
        )));
    }
    Ok(())
}

fn build_rows<F>(labels: &[usize], k: usize, row: F) -> CandidateMatrix
where
    F: Fn(usize, usize, &mut CandidateRow) + Sync,
{
    let rows: Vec<CandidateRow> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = CandidateRow::new(k);
            r.set(y);
            row(i, y, &mut r);
            r
        })
        .collect();
    let mut m = CandidateMatrix::empty(labels.len(), k);
    for (i, r) in rows.iter().enumerate() {
        for j in r.iter() {
            m.insert(i, j);
        }
    }
    m
}

/// Scratch membership vector for one row.
struct CandidateRow(Vec<bool>);

impl CandidateRow {
    fn new(k: usize) -> Self {
        Self(vec![false; k])
    }
    fn set(&mut self, j: usize) {
        self.0[j] = true;
    }
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(j, _)| j)
    }
}

/// Uniform subset sampling: every false label is a fair coin flip, which makes
/// all 2^(K-1) candidate sets equally likely.
pub fn gen_uss(labels: &[usize], k: usize, seed: u64) -> Result<CandidateMatrix> {
    check_labels(labels, k)?;
    Ok(build_rows(labels, k, |i, y, row| {
        let mut rng = rng::stream(seed, domain::USS, i as u64);
        for j in (0..k).filter(|&j| j != y) {
            if rng.random_bool(0.5) {
                row.set(j);
            }
        }
    }))
}

/// Flip-probability sampling. If no false label was drawn, one is chosen
/// uniformly so that every row has at least two candidates.
pub fn gen_fps(labels: &[usize], k: usize, eta: f64, seed: u64) -> Result<CandidateMatrix> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::config(format!(
            "FPS eta must lie in (0, 1), got {eta}"
        )));
    }
    check_labels(labels, k)?;
    Ok(build_rows(labels, k, |i, y, row| {
        let mut rng = rng::stream(seed, domain::FPS, i as u64);
        let mut flipped = false;
        for j in (0..k).filter(|&j| j != y) {
            if rng.random_bool(eta) {
                row.set(j);
                flipped = true;
            }
        }
        if !flipped {
            let pick = rng.random_range(0..k - 1);
            row.set(if pick >= y { pick + 1 } else { pick });
        }
    }))
}

/// Linear softmax classifier used to produce instance-dependent candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    pub train_accuracy: f64,
}

impl AuxModel {
    fn standardize(&self, x: ArrayView2<'_, f32>) -> Array2<f64> {
        let mut z = x.mapv(f64::from);
        z -= &self.mean;
        z /= &self.scale;
        z
    }

    pub fn logits(&self, x: ArrayView2<'_, f32>) -> Array2<f64> {
        self.standardize(x).dot(&self.weights.t()) + &self.bias
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f32>) -> Array2<f64> {
        math::softmax(self.logits(x).view())
    }

    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Vec<usize> {
        self.logits(x).outer_iter().map(math::argmax).collect()
    }
}

const AUX_LR: f64 = 0.05;
const AUX_MOMENTUM: f64 = 0.9;
const AUX_BATCH: usize = 64;
pub const AUX_DEFAULT_EPOCHS: usize = 20;

/// Trains a standardized linear softmax head by minibatch SGD on cross-entropy.
pub fn train_aux_classifier(
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    k: usize,
    epochs: usize,
    seed: u64,
) -> Result<AuxModel> {
    let (n, d) = features.dim();
    if d == 0 {
        return Err(Error::config(
            "auxiliary classifier needs feature dimension d >= 1",
        ));
    }
    if n == 0 || labels.len() != n {
        return Err(Error::config(format!(
            "auxiliary classifier needs one label per row ({} labels, {n} rows)",
            labels.len()
        )));
    }
    check_labels(labels, k)?;

    let x = features.mapv(f64::from);
    let mean = x.mean_axis(Axis(0)).expect("n >= 1");
    let scale = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut model = AuxModel {
        weights: Array2::zeros((k, d)),
        bias: Array1::zeros(k),
        mean,
        scale,
        train_accuracy: 0.0,
    };
    let z = model.standardize(features);
    let mut vel_w = Array2::<f64>::zeros((k, d));
    let mut vel_b = Array1::<f64>::zeros(k);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..epochs {
        let mut rng = rng::stream(seed, domain::AUX, epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(AUX_BATCH) {
            let xb = z.select(Axis(0), batch);
            let mut grad = math::softmax((xb.dot(&model.weights.t()) + &model.bias).view());
            for (r, &i) in batch.iter().enumerate() {
                grad[[r, labels[i]]] -= 1.0;
            }
            grad /= batch.len() as f64;
            let gw = grad.t().dot(&xb);
            let gb = grad.sum_axis(Axis(0));
            vel_w = &vel_w * AUX_MOMENTUM + &gw;
            vel_b = &vel_b * AUX_MOMENTUM + &gb;
            model.weights.scaled_add(-AUX_LR, &vel_w);
            model.bias.scaled_add(-AUX_LR, &vel_b);
        }
    }

    let preds = model.predict(features);
    model.train_accuracy =
        preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
    Ok(model)
}

/// Number of classes the auxiliary model contributes per row.
pub fn instance_top_m(k: usize, top_fraction: f64) -> Result<usize> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::config(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    if top_fraction * (k as f64) < 1.0 {
        return Err(Error::config(format!(
            "top_fraction {top_fraction} selects fewer than one of K={k} classes"
        )));
    }
    Ok(((top_fraction * k as f64).ceil() as usize).min(k))
}

/// Indices of the `m` largest entries, ties broken by smaller index.
pub fn top_m_indices(row: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// Row i = {y_i} ∪ top-m classes of the auxiliary model on x_i.
pub fn gen_instance_dependent(
    aux: &AuxModel,
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    k: usize,
    top_fraction: f64,
) -> Result<CandidateMatrix> {
    check_labels(labels, k)?;
    let m = instance_top_m(k, top_fraction)?;
    if aux.weights.nrows() != k || aux.weights.ncols() != features.ncols() {
        return Err(Error::shape(
            "auxiliary model does not match the features / label space",
        ));
    }
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let probs = aux.predict_proba(features);
    Ok(build_rows(labels, k, |i, _, row| {
        let p = probs.row(i);
        for j in top_m_indices(p.as_slice().expect("standard layout"), m) {
            row.set(j);
        }
    }))
}

/// Trains the auxiliary model and then generates instance-dependent candidates.
pub fn gen_instance_dependent_trained(
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    k: usize,
    top_fraction: f64,
    seed: u64,
) -> Result<CandidateMatrix> {
    instance_top_m(k, top_fraction)?;
    let aux = train_aux_classifier(features, labels, k, AUX_DEFAULT_EPOCHS, seed)?;
    gen_instance_dependent(&aux, features, labels, k, top_fraction)
}

/// Dispatches on the strategy.
pub fn generate(
    spec: &GenSpec,
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    k: usize,
) -> Result<CandidateMatrix> {
    match spec.strategy {
        Strategy::Uss => gen_uss(labels, k, spec.seed),
        Strategy::Fps { eta } => gen_fps(labels, k, eta, spec.seed),
        Strategy::InstanceDependent { top_fraction } => {
            gen_instance_dependent_trained(features, labels, k, top_fraction, spec.seed)
        }
    }
}

/// floor(x) that treats values within rounding noise of an integer as that integer.
fn stable_floor(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Exponential long-tail profile n_j = ⌊n_max · γ^(−j/(K−1))⌋.
pub fn longtail_counts(n_max: usize, gamma: f64, k: usize) -> Result<Vec<usize>> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::config(format!(
            "imbalance ratio gamma must be >= 1, got {gamma}"
        )));
    }
    if k < 2 {
        return Err(Error::config(format!(
            "long-tail profile needs K >= 2, got {k}"
        )));
    }
    let counts: Vec<usize> = (0..k)
        .map(|j| stable_floor(n_max as f64 * gamma.powf(-(j as f64) / (k - 1) as f64)))
        .collect();
    if counts[k - 1] < 1 {
        return Err(Error::config(format!(
            "gamma {gamma} too large: the rarest class would keep 0 of {n_max} instances"
        )));
    }
    Ok(counts)
}

/// Row indices kept by the long-tail subsample: ⌊n_max·γ^(−j/(K−1))⌋
/// uniformly chosen instances of class j, in increasing order.
pub fn longtail_indices(labels: &[usize], k: usize, gamma: f64, seed: u64) -> Result<Vec<usize>> {
    check_labels(labels, k)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let targets = longtail_counts(n_max, gamma, k)?;

    let mut keep = Vec::new();
    for (j, members) in by_class.iter().enumerate() {
        let take = targets[j].min(members.len());
        let mut rng = rng::stream(seed, domain::LONGTAIL, j as u64);
        keep.extend(
            index::sample(&mut rng, members.len(), take)
                .into_iter()
                .map(|t| members[t]),
        );
    }
    keep.sort_unstable();
    Ok(keep)
}

/// [`longtail_indices`] applied to a labelled dataset.
pub fn subsample_longtail(dataset: &PLLDataset, gamma: f64, seed: u64) -> Result<PLLDataset> {
    let labels = dataset
        .oracle_labels
        .as_ref()
        .ok_or_else(|| Error::config("long-tail subsampling needs oracle labels"))?;
    Ok(dataset.select(&longtail_indices(labels, dataset.k(), gamma, seed)?))
}
