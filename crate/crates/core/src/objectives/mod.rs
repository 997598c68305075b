//! Partial-label disambiguation objectives.
//!
//! | Kind | Batch loss | State |
//! |---|---|---|
//! | `Cc` | −log Σ_{S} p | – |
//! | `Proden` | weighted CE to per-sample confidences | confidences, refreshed each epoch |
//! | `Lws` | leveraged sigmoid loss | – |
//! | `Cavl` | CE to argmax logit within S | – |
//! | `AbsMae` / `AbsGce` | average of MAE / GCE over S | – |
//! | `CrdFeat` | non-candidate exclusion + two-view KL | – |
//! | `Records` | base loss; disambiguation and prediction on prior-debiased logits | momentum prototype, prior |
//! | `Solar` | weighted CE to Sinkhorn plan rows | class distribution |
//! | `Pop` | base loss on purified sets | working candidate sets |

mod losses;
mod sinkhorn;
mod state;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use losses::{
    cavl_targets, cross_entropy, loss_abs, loss_cavl, loss_cc, loss_crd, loss_lws,
    loss_weighted_ce, lws_weights, psi, AbsKind, CrdOutput, LossOutput,
};
pub use sinkhorn::{
    sinkhorn_assign, SinkhornOutput, CONVERGENCE_TOL as SINKHORN_TOL, DEFAULT_EPS as SINKHORN_EPS,
};
pub use state::{
    pop_purify, proden_update, records_debias, records_update, uniform_weights, ObjectiveState,
    RecordsState, POP_MAX_THRESHOLD,
};

use crate::data::CandidateMatrix;
use crate::error::{Error, Result};
use crate::math;

fn default_beta() -> f64 {
    1.0
}
fn default_q() -> f64 {
    0.7
}
fn default_lambda() -> f64 {
    1.0
}
fn default_noise_sigma() -> f64 {
    0.1
}
fn default_records_m() -> f64 {
    0.9
}
fn default_tau() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    sinkhorn::DEFAULT_EPS
}
fn default_iters() -> usize {
    sinkhorn::DEFAULT_ITERS
}
fn default_dist_momentum() -> f64 {
    0.9
}
fn default_purge_rate() -> f64 {
    0.02
}
fn default_base() -> Box<ObjectiveKind> {
    Box::new(ObjectiveKind::Cc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    Cc,
    Proden,
    Lws {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Cavl,
    AbsMae,
    AbsGce {
        #[serde(default = "default_q")]
        q: f64,
    },
    CrdFeat {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f64,
    },
    Records {
        #[serde(default = "default_base")]
        base: Box<ObjectiveKind>,
        #[serde(default = "default_records_m")]
        m: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Solar {
        #[serde(default = "default_eps")]
        sinkhorn_eps: f64,
        #[serde(default = "default_iters")]
        sinkhorn_iters: usize,
        #[serde(default = "default_dist_momentum")]
        dist_momentum: f64,
    },
    Pop {
        #[serde(default = "default_base")]
        base: Box<ObjectiveKind>,
        #[serde(default = "default_purge_rate")]
        purge_rate: f64,
    },
}

impl ObjectiveKind {
    /// Default-parameter objective by name. Wrappers accept `records:<base>` and `pop:<base>`.
    pub fn from_name(name: &str) -> Result<Self> {
        let name = name.trim().to_ascii_lowercase().replace('-', "_");
        if let Some((wrapper, base)) = name.split_once(':') {
            let base = Box::new(Self::from_name(base)?);
            let kind = match wrapper {
                "records" => ObjectiveKind::Records {
                    base,
                    m: default_records_m(),
                    tau: default_tau(),
                },
                "pop" => ObjectiveKind::Pop {
                    base,
                    purge_rate: default_purge_rate(),
                },
                other => {
                    return Err(Error::config(format!(
                        "objective {other:?} does not wrap a base objective"
                    )))
                }
            };
            kind.validate()?;
            return Ok(kind);
        }
        Ok(match name.as_str() {
            "cc" => ObjectiveKind::Cc,
            "proden" => ObjectiveKind::Proden,
            "lws" => ObjectiveKind::Lws {
                beta: default_beta(),
            },
            "cavl" => ObjectiveKind::Cavl,
            "abs_mae" => ObjectiveKind::AbsMae,
            "abs_gce" => ObjectiveKind::AbsGce { q: default_q() },
            "crd" | "crd_feat" => ObjectiveKind::CrdFeat {
                lambda: default_lambda(),
                noise_sigma: default_noise_sigma(),
            },
            "records" => ObjectiveKind::Records {
                base: default_base(),
                m: default_records_m(),
                tau: default_tau(),
            },
            "solar" => ObjectiveKind::Solar {
                sinkhorn_eps: default_eps(),
                sinkhorn_iters: default_iters(),
                dist_momentum: default_dist_momentum(),
            },
            "pop" => ObjectiveKind::Pop {
                base: default_base(),
                purge_rate: default_purge_rate(),
            },
            other => return Err(Error::config(format!("unknown objective {other:?}"))),
        })
    }

    pub fn name(&self) -> String {
        match self {
            ObjectiveKind::Cc => "cc".into(),
            ObjectiveKind::Proden => "proden".into(),
            ObjectiveKind::Lws { .. } => "lws".into(),
            ObjectiveKind::Cavl => "cavl".into(),
            ObjectiveKind::AbsMae => "abs_mae".into(),
            ObjectiveKind::AbsGce { .. } => "abs_gce".into(),
            ObjectiveKind::CrdFeat { .. } => "crd_feat".into(),
            ObjectiveKind::Records { base, .. } => format!("records:{}", base.name()),
            ObjectiveKind::Solar { .. } => "solar".into(),
            ObjectiveKind::Pop { base, .. } => format!("pop:{}", base.name()),
        }
    }

    pub fn is_wrapper(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::Records { .. } | ObjectiveKind::Pop { .. }
        )
    }

    /// The innermost non-wrapping objective.
    pub fn innermost(&self) -> &ObjectiveKind {
        match self {
            ObjectiveKind::Records { base, .. } | ObjectiveKind::Pop { base, .. } => {
                base.innermost()
            }
            other => other,
        }
    }

    pub fn needs_two_views(&self) -> bool {
        matches!(self.innermost(), ObjectiveKind::CrdFeat { .. })
    }

    pub fn records(&self) -> Option<(f64, f64)> {
        match self {
            ObjectiveKind::Records { m, tau, .. } => Some((*m, *tau)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("objective {}: {what}", self.name())));
        match self {
            ObjectiveKind::Lws { beta } if !(*beta >= 0.0) => bad("beta must be >= 0"),
            ObjectiveKind::AbsGce { q } if !(*q > 0.0 && *q <= 1.0) => bad("q must lie in (0, 1]"),
            ObjectiveKind::CrdFeat {
                lambda,
                noise_sigma,
            } if !(*lambda >= 0.0 && *noise_sigma >= 0.0) => {
                bad("lambda and noise_sigma must be >= 0")
            }
            ObjectiveKind::Records { base, m, tau } => {
                if base.is_wrapper() {
                    return bad("base must not itself be a wrapper");
                }
                if !(0.0..1.0).contains(m) || !(*tau >= 0.0) {
                    return bad("m must lie in [0, 1) and tau must be >= 0");
                }
                base.validate()
            }
            ObjectiveKind::Pop { base, purge_rate } => {
                if base.is_wrapper() {
                    return bad("base must not itself be a wrapper");
                }
                if !(*purge_rate > 0.0 && *purge_rate < 1.0) {
                    return bad("purge_rate must lie in (0, 1)");
                }
                base.validate()
            }
            ObjectiveKind::Solar {
                sinkhorn_eps,
                sinkhorn_iters,
                dist_momentum,
            } => {
                if !(*sinkhorn_eps > 0.0)
                    || *sinkhorn_iters == 0
                    || !(0.0..1.0).contains(dist_momentum)
                {
                    return bad("sinkhorn_eps > 0, sinkhorn_iters >= 1 and dist_momentum in [0, 1) required");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl ObjectiveState {
    /// Fresh state: PRODEN weights uniform over S, RECORDS prior uniform,
    /// SoLar distribution uniform, POP working sets equal to the input sets.
    pub fn init(kind: &ObjectiveKind, candidates: &CandidateMatrix) -> Self {
        let k = candidates.k();
        let mut st = ObjectiveState::default();
        st.fill(kind, candidates);
        if let ObjectiveKind::Records { .. } = kind {
            st.records = Some(RecordsState::new(k));
        }
        st
    }

    fn fill(&mut self, kind: &ObjectiveKind, candidates: &CandidateMatrix) {
        match kind {
            ObjectiveKind::Proden => self.proden_weights = Some(uniform_weights(candidates)),
            ObjectiveKind::Solar { .. } => {
                let k = candidates.k();
                self.solar_dist = Some(Array1::from_elem(k, 1.0 / k as f64));
            }
            ObjectiveKind::Records { base, .. } => self.fill(base, candidates),
            ObjectiveKind::Pop { base, .. } => {
                self.pop_sets = Some(candidates.clone());
                self.fill(base, candidates);
            }
            _ => {}
        }
    }
}

/// Loss and logit gradients for one minibatch (two views for CRD).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub grad_second: Option<Array2<f64>>,
    pub warnings: usize,
    /// Sinkhorn plan diagnostics when SoLar ran.
    pub sinkhorn_residual: Option<f64>,
}

impl From<LossOutput> for BatchLoss {
    fn from(o: LossOutput) -> Self {
        BatchLoss {
            loss: o.loss,
            grad: o.grad,
            grad_second: None,
            warnings: o.warnings,
            sinkhorn_residual: None,
        }
    }
}

/// Evaluates `kind` on a minibatch.
///
/// `rows` are the dataset indices of the batch and `mask` the original
/// candidate rows for them. `second_view` carries the noisy second view's
/// logits and is required exactly when the innermost objective is CRD.
pub fn batch_loss(
    kind: &ObjectiveKind,
    logits: ArrayView2<'_, f64>,
    second_view: Option<ArrayView2<'_, f64>>,
    rows: &[usize],
    mask: ArrayView2<'_, bool>,
    state: &ObjectiveState,
) -> Result<BatchLoss> {
    if rows.len() != logits.nrows() {
        return Err(Error::shape(format!(
            "{} row indices for {} logit rows",
            rows.len(),
            logits.nrows()
        )));
    }
    match kind {
        ObjectiveKind::Cc => Ok(loss_cc(logits, mask)?.into()),
        ObjectiveKind::Proden => {
            let weights = state
                .proden_weights
                .as_ref()
                .ok_or_else(|| Error::config("PRODEN state is not initialised"))?
                .select(ndarray::Axis(0), rows);
            Ok(loss_weighted_ce(logits, weights.view())?.into())
        }
        ObjectiveKind::Lws { beta } => {
            let w = lws_weights(logits, mask);
            Ok(loss_lws(logits, mask, *beta, w.view())?.into())
        }
        ObjectiveKind::Cavl => Ok(loss_cavl(logits, mask)?.into()),
        ObjectiveKind::AbsMae => Ok(loss_abs(logits, mask, AbsKind::Mae)?.into()),
        ObjectiveKind::AbsGce { q } => Ok(loss_abs(logits, mask, AbsKind::Gce { q: *q })?.into()),
        ObjectiveKind::CrdFeat { lambda, .. } => {
            let other =
                second_view.ok_or_else(|| Error::config("CRD needs a second feature view"))?;
            let out = loss_crd(logits, other, mask, *lambda)?;
            Ok(BatchLoss {
                loss: out.loss,
                grad: out.grad_a,
                grad_second: Some(out.grad_b),
                warnings: out.warnings,
                sinkhorn_residual: None,
            })
        }
        ObjectiveKind::Solar {
            sinkhorn_eps,
            sinkhorn_iters,
            ..
        } => {
            let r = state
                .solar_dist
                .as_ref()
                .ok_or_else(|| Error::config("SoLar state is not initialised"))?;
            let probs = math::softmax(logits);
            let plan =
                sinkhorn_assign(probs.view(), mask, r.view(), *sinkhorn_eps, *sinkhorn_iters)?;
            let mut out: BatchLoss = loss_weighted_ce(logits, plan.targets().view())?.into();
            out.warnings += usize::from(!plan.dropped_columns.is_empty());
            out.sinkhorn_residual = Some(plan.max_residual());
            Ok(out)
        }
        ObjectiveKind::Records { base, .. } => {
            if state.records.is_none() {
                return Err(Error::config("RECORDS state is not initialised"));
            }
            // the adjustment acts on disambiguation and prediction, not on the loss itself
            batch_loss(base, logits, second_view, rows, mask, state)
        }
        ObjectiveKind::Pop { base, .. } => {
            let sets = state
                .pop_sets
                .as_ref()
                .ok_or_else(|| Error::config("POP state is not initialised"))?;
            let working = sets.batch_mask(rows);
            batch_loss(base, logits, second_view, rows, working.view(), state)
        }
    }
}

/// Counters from an end-of-epoch state refresh.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochUpdate {
    pub warnings: usize,
    pub pop_removed: usize,
}

/// End-of-epoch refresh from full-dataset logits: PRODEN confidences, POP
/// purification, SoLar distribution estimate. RECORDS passes debiased logits
/// down to its base, so its base disambiguates on them.
pub fn epoch_end(
    kind: &ObjectiveKind,
    state: &mut ObjectiveState,
    logits_all: ArrayView2<'_, f64>,
    candidates: &CandidateMatrix,
    epoch: usize,
) -> Result<EpochUpdate> {
    let mut upd = EpochUpdate::default();
    match kind {
        ObjectiveKind::Proden => {
            let sets = state.pop_sets.as_ref().unwrap_or(candidates);
            let probs = math::softmax(logits_all);
            let (w, warnings) = proden_update(probs.view(), sets.to_mask().view());
            state.proden_weights = Some(w);
            upd.warnings += warnings;
        }
        ObjectiveKind::Solar { dist_momentum, .. } => {
            let sets = state.pop_sets.as_ref().unwrap_or(candidates);
            let probs = math::softmax(logits_all);
            let (restricted, warnings) = proden_update(probs.view(), sets.to_mask().view());
            upd.warnings += warnings;
            let estimate = restricted
                .mean_axis(ndarray::Axis(0))
                .expect("non-empty dataset");
            let r = state
                .solar_dist
                .as_mut()
                .ok_or_else(|| Error::config("SoLar state is not initialised"))?;
            *r = &*r * *dist_momentum + &estimate * (1.0 - dist_momentum);
            *r /= r.sum();
        }
        ObjectiveKind::Records { base, tau, .. } => {
            let prior = state
                .records
                .as_ref()
                .map(|r| r.prior.clone())
                .unwrap_or_else(|| Array1::from_elem(candidates.k(), 1.0 / candidates.k() as f64));
            let adjusted = records_debias(logits_all, prior.view(), *tau);
            return epoch_end(base, state, adjusted.view(), candidates, epoch);
        }
        ObjectiveKind::Pop { base, purge_rate } => {
            let probs = math::softmax(logits_all);
            let sets = state
                .pop_sets
                .as_mut()
                .ok_or_else(|| Error::config("POP state is not initialised"))?;
            upd.pop_removed = pop_purify(sets, probs.view(), epoch, *purge_rate)?;
            let inner = epoch_end(base, state, logits_all, candidates, epoch)?;
            upd.warnings += inner.warnings;
        }
        _ => {}
    }
    Ok(upd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in [
            "cc",
            "proden",
            "lws",
            "cavl",
            "abs_mae",
            "abs_gce",
            "crd_feat",
            "solar",
            "records:cc",
            "pop:proden",
        ] {
            assert_eq!(ObjectiveKind::from_name(name).unwrap().name(), name);
        }
        assert!(ObjectiveKind::from_name("pico").is_err());
        assert!(ObjectiveKind::from_name("records:pop:cc").is_err());
    }

    #[test]
    fn validation_ranges() {
        assert!(ObjectiveKind::Lws { beta: -1.0 }.validate().is_err());
        assert!(ObjectiveKind::AbsGce { q: 0.0 }.validate().is_err());
        assert!(ObjectiveKind::Records {
            base: Box::new(ObjectiveKind::Cc),
            m: 1.0,
            tau: 1.0
        }
        .validate()
        .is_err());
        assert!(ObjectiveKind::Pop {
            base: Box::new(ObjectiveKind::Cc),
            purge_rate: 0.02
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn state_init_per_kind() {
        let c = CandidateMatrix::from_rows(3, &[vec![0, 1], vec![2]]).unwrap();
        let st = ObjectiveState::init(&ObjectiveKind::from_name("pop:proden").unwrap(), &c);
        assert_eq!(st.pop_sets.as_ref(), Some(&c));
        let w = st.proden_weights.unwrap();
        assert_eq!(w.row(0).to_vec(), vec![0.5, 0.5, 0.0]);
        let st = ObjectiveState::init(&ObjectiveKind::from_name("solar").unwrap(), &c);
        assert_eq!(st.solar_dist.unwrap().to_vec(), vec![1.0 / 3.0; 3]);
        assert!(
            ObjectiveState::init(&ObjectiveKind::from_name("records").unwrap(), &c)
                .records
                .is_some()
        );
    }
}
