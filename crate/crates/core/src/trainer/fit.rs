use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{
    default_bottleneck, CosineClassifier, FeatureAdapter, Model, ModelGrads, DEFAULT_ADAPTER_SCALE,
    DEFAULT_SIGMA,
};
use super::sgd::{sgd_step, SgdConfig};
use crate::data::{ConfidenceMatrix, FeatureMatrix, PLLDataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy, MetricBlock};
use crate::math;
use crate::objectives::{
    batch_loss, epoch_end, proden_update, records_debias, records_update, ObjectiveKind,
    ObjectiveState,
};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub use_adapter: bool,
    /// Bottleneck width; defaults to the clamp(2^⌊log₂(K/2)⌋, 4, d/2) rule.
    pub adapter_rank: Option<usize>,
    pub adapter_scale: f64,
    pub sigma: f64,
    /// Skip weight decay on text-initialised W during the first epoch.
    pub protect_init: bool,
    /// K×d PLLF file of class text embeddings.
    pub text_init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            objective: ObjectiveKind::Cc,
            use_adapter: false,
            adapter_rank: None,
            adapter_scale: DEFAULT_ADAPTER_SCALE,
            sigma: DEFAULT_SIGMA,
            protect_init: false,
            text_init: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("train.{key}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be positive");
        }
        if !(self.adapter_scale.is_finite()) {
            return bad("adapter_scale", "must be finite");
        }
        if self.adapter_rank == Some(0) {
            return bad("adapter_rank", "must be >= 1");
        }
        self.objective.validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Held-out split scored after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EvalSplit<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitInputs<'a> {
    /// Class text embeddings for classifier initialisation.
    pub text_init: Option<&'a FeatureMatrix>,
    /// Per-row confidences used to seed PRODEN weights (restricted to S).
    pub confidences: Option<&'a ConfidenceMatrix>,
    pub test: Option<EvalSplit<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub warnings: usize,
    pub pop_removed: usize,
    pub max_sinkhorn_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub objective: String,
    pub epochs: Vec<EpochRecord>,
    pub test_metrics: Option<MetricBlock>,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }

    /// One `key=value` block per epoch, then the final test metrics.
    pub fn to_text(&self) -> String {
        let mut out = format!("objective={}\n", self.objective);
        for e in &self.epochs {
            write!(out, "epoch={} train_loss={:.6}", e.epoch, e.train_loss).unwrap();
            if let Some(a) = e.train_acc {
                write!(out, " train_acc={a:.6}").unwrap();
            }
            if let Some(a) = e.test_acc {
                write!(out, " test_acc={a:.6}").unwrap();
            }
            if let Some(r) = e.max_sinkhorn_residual {
                write!(out, " sinkhorn_residual={r:.3e}").unwrap();
            }
            writeln!(
                out,
                " warnings={} pop_removed={}",
                e.warnings, e.pop_removed
            )
            .unwrap();
        }
        if let Some(m) = &self.test_metrics {
            out.push_str(&m.to_report());
        }
        out
    }
}

/// Logits used for prediction: RECORDS scores with its debiased logits.
pub fn predict_logits(
    model: &Model,
    kind: &ObjectiveKind,
    state: &ObjectiveState,
    features: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let logits = model.logits(features);
    match (kind.records(), &state.records) {
        (Some((_, tau)), Some(rec)) => records_debias(logits.view(), rec.prior.view(), tau),
        _ => logits,
    }
}

pub fn predict(
    model: &Model,
    kind: &ObjectiveKind,
    state: &ObjectiveState,
    features: ArrayView2<'_, f64>,
) -> Vec<usize> {
    predict_logits(model, kind, state, features)
        .outer_iter()
        .map(math::argmax)
        .collect()
}

/// Initial model: text-initialised or random unit class directions, plus a
/// zero-initialised adapter when enabled.
pub fn init_model(
    k: usize,
    d: usize,
    text: Option<&FeatureMatrix>,
    cfg: &TrainConfig,
) -> Result<Model> {
    let classifier = match text {
        Some(t) => {
            if t.n() != k || t.d() != d {
                return Err(Error::config(format!(
                    "text embeddings are {}×{}, expected {k}×{d}",
                    t.n(),
                    t.d()
                )));
            }
            CosineClassifier::from_text(t, cfg.sigma)?
        }
        None => CosineClassifier::random(k, d, cfg.sigma, cfg.seed),
    };
    let adapter = cfg.use_adapter.then(|| {
        let r = cfg.adapter_rank.unwrap_or_else(|| default_bottleneck(k, d));
        FeatureAdapter::new(d, r, cfg.adapter_scale, cfg.seed)
    });
    Ok(Model {
        classifier,
        adapter,
    })
}

struct Velocity {
    weights: Array2<f64>,
    adapter: Option<(Array2<f64>, Array2<f64>)>,
}

fn noisy_view(x: &Array2<f64>, sigma: f64, seed: u64, index: u64) -> Array2<f64> {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = rng::stream(seed, domain::CRD_NOISE, index);
    x.mapv(|v| v + normal.sample(&mut rng))
}

/// Trains the cosine head (and adapter) on a partially labelled dataset.
pub fn fit(
    dataset: &PLLDataset,
    inputs: FitInputs<'_>,
    cfg: &TrainConfig,
) -> Result<(Model, ObjectiveState, TrainReport)> {
    cfg.validate()?;
    let (n, k) = (dataset.n(), dataset.k());
    if n == 0 {
        return Err(Error::config("training set is empty"));
    }
    let empty = dataset.candidates.empty_rows();
    if empty > 0 {
        return Err(Error::config(format!(
            "{empty} training rows have an empty candidate set"
        )));
    }
    if let Some(test) = inputs.test {
        if test.features.d() != dataset.features.d() || test.features.n() != test.labels.len() {
            return Err(Error::shape(
                "test split does not match the training feature width or its labels",
            ));
        }
    }

    let kind = &cfg.objective;
    let x_all = dataset.features.to_f64();
    let mut model = init_model(k, dataset.features.d(), inputs.text_init, cfg)?;
    let mut state = ObjectiveState::init(kind, &dataset.candidates);
    if let (Some(conf), Some(w)) = (inputs.confidences, state.proden_weights.as_mut()) {
        if conf.n() != n || conf.k() != k {
            return Err(Error::shape(
                "confidence matrix does not match the training set",
            ));
        }
        let (seeded, _) = proden_update(conf.to_f64().view(), dataset.candidates.to_mask().view());
        *w = seeded;
    }
    let mut vel = Velocity {
        weights: Array2::zeros(model.classifier.weights.raw_dim()),
        adapter: model.adapter.as_ref().map(|a| {
            (
                Array2::zeros(a.down.raw_dim()),
                Array2::zeros(a.up.raw_dim()),
            )
        }),
    };
    let test_x = inputs.test.map(|t| t.features.to_f64());
    let crd_sigma = match kind.innermost() {
        ObjectiveKind::CrdFeat { noise_sigma, .. } => Some(*noise_sigma),
        _ => None,
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_counter = 0u64;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, domain::SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        let mut warnings = 0;
        let mut max_residual: Option<f64> = None;

        for rows in order.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), rows);
            let mask = dataset.candidates.batch_mask(rows);

            if let (Some((m, _)), Some(rec)) = (kind.records(), state.records.as_mut()) {
                let embedded = model.embed(xb.view());
                let clf = &model.classifier;
                records_update(rec, embedded.view(), m, |f| Ok(clf.logits_one(f)))?;
            }

            let (grads, out) = match crd_sigma {
                Some(sigma) => {
                    let xa = noisy_view(&xb, sigma, cfg.seed, 2 * batch_counter);
                    let xc = noisy_view(&xb, sigma, cfg.seed, 2 * batch_counter + 1);
                    let fa = model.forward(xa.view());
                    let fc = model.forward(xc.view());
                    let out = batch_loss(
                        kind,
                        fa.logits.view(),
                        Some(fc.logits.view()),
                        rows,
                        mask.view(),
                        &state,
                    )?;
                    let mut g = model.backward(&fa, out.grad.view());
                    if let Some(g2) = &out.grad_second {
                        g.add_assign(&model.backward(&fc, g2.view()));
                    }
                    (g, out)
                }
                None => {
                    let fwd = model.forward(xb.view());
                    let out = batch_loss(kind, fwd.logits.view(), None, rows, mask.view(), &state)?;
                    (model.backward(&fwd, out.grad.view()), out)
                }
            };
            batch_counter += 1;
            if !out.loss.is_finite() || !grads.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss or gradient in epoch {}",
                    epoch + 1
                )));
            }
            apply_step(
                &mut model,
                &grads,
                &mut vel,
                cfg,
                inputs.text_init.is_some() && cfg.protect_init && epoch == 0,
            )?;
            loss_sum += out.loss * rows.len() as f64;
            warnings += out.warnings;
            if let Some(r) = out.sinkhorn_residual {
                max_residual = Some(max_residual.map_or(r, |m| m.max(r)));
            }
        }

        let logits_all = model.logits(x_all.view());
        let upd = epoch_end(
            kind,
            &mut state,
            logits_all.view(),
            &dataset.candidates,
            epoch + 1,
        )?;
        let train_acc = match &dataset.oracle_labels {
            Some(y) => Some(accuracy(&predict(&model, kind, &state, x_all.view()), y)?),
            None => None,
        };
        let test_acc = match (inputs.test, &test_x) {
            (Some(t), Some(x)) => Some(accuracy(
                &predict(&model, kind, &state, x.view()),
                t.labels,
            )?),
            _ => None,
        };
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc,
            test_acc,
            warnings: warnings + upd.warnings,
            pop_removed: upd.pop_removed,
            max_sinkhorn_residual: max_residual,
        });
    }

    let test_metrics = match (inputs.test, &test_x) {
        (Some(t), Some(x)) => {
            let preds = predict(&model, kind, &state, x.view());
            Some(MetricBlock::compute(
                &preds,
                t.labels,
                k,
                Some(&dataset.class_counts),
                None,
            )?)
        }
        _ => None,
    };
    let report = TrainReport {
        objective: kind.name(),
        epochs: records,
        test_metrics,
    };
    Ok((model, state, report))
}

fn apply_step(
    model: &mut Model,
    grads: &ModelGrads,
    vel: &mut Velocity,
    cfg: &TrainConfig,
    protect: bool,
) -> Result<()> {
    let sgd = cfg.sgd();
    let head = if protect {
        SgdConfig {
            weight_decay: 0.0,
            ..sgd
        }
    } else {
        sgd
    };
    sgd_step(
        &mut model.classifier.weights,
        &grads.weights,
        &mut vel.weights,
        &head,
    )?;
    if let (Some(a), Some((gd, gu)), Some((vd, vu))) = (
        model.adapter.as_mut(),
        grads.adapter.as_ref(),
        vel.adapter.as_mut(),
    ) {
        sgd_step(&mut a.down, gd, vd, &sgd)?;
        sgd_step(&mut a.up, gu, vu, &sgd)?;
    }
    Ok(())
}
