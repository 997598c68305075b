//! Disambiguation losses on a minibatch of logits.
//!
//! Every function returns the batch-mean loss and its gradient with respect
//! to the logits (already divided by the batch size). `mask` is the B×K
//! candidate membership of the batch rows; p = softmax(logits) row-wise.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::math::{self, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Rows where a probability had to be clamped before a logarithm.
    pub warnings: usize,
}

fn check(logits: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<()> {
    if logits.dim() != mask.dim() {
        return Err(Error::shape(format!(
            "logits are {:?} but candidate mask is {:?}",
            logits.dim(),
            mask.dim()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::shape("empty minibatch"));
    }
    if let Some(i) = mask.outer_iter().position(|r| !r.iter().any(|&b| b)) {
        return Err(Error::shape(format!(
            "empty candidate set in batch row {i}"
        )));
    }
    Ok(())
}

/// Plain cross-entropy against hard labels.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossOutput> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    let mut targets = Array2::zeros((b, k));
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::shape(format!("label {y} out of range for K={k}")));
        }
        targets[[i, y]] = 1.0;
    }
    loss_weighted_ce(logits, targets.view())
}

/// CC: −log Σ_{j∈S} p_j.
pub fn loss_cc(logits: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<LossOutput> {
    check(logits, mask)?;
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut warnings = 0;
    for ((z, m), mut g) in logits
        .outer_iter()
        .zip(mask.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let lse = math::logsumexp(z);
        let log_mass = math::masked_logsumexp(z, m) - lse;
        if log_mass < PROB_FLOOR.ln() {
            warnings += 1;
            loss -= PROB_FLOOR.ln();
        } else {
            loss -= log_mass;
        }
        // d/dz_k = p_k − [k∈S] p_k / Σ_S p
        let p = math::softmax_row(z);
        let w = math::masked_softmax_row(z, m);
        g.assign(&((&p - &w) / b));
    }
    Ok(LossOutput {
        loss: loss / b,
        grad,
        warnings,
    })
}

/// −Σ_j w_ij log p_ij with fixed target rows w (each summing to 1).
pub fn loss_weighted_ce(
    logits: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
) -> Result<LossOutput> {
    if logits.dim() != weights.dim() {
        return Err(Error::shape(format!(
            "logits are {:?} but weights are {:?}",
            logits.dim(),
            weights.dim()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::shape("empty minibatch"));
    }
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut warnings = 0;
    for ((z, w), mut g) in logits
        .outer_iter()
        .zip(weights.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let lse = math::logsumexp(z);
        let mut clamped = false;
        for (&zj, &wj) in z.iter().zip(w) {
            if wj != 0.0 {
                let lp = zj - lse;
                if lp < PROB_FLOOR.ln() {
                    clamped = true;
                }
                loss -= wj * lp.max(PROB_FLOOR.ln());
            }
        }
        warnings += usize::from(clamped);
        let p = math::softmax_row(z);
        let wsum = w.sum();
        Zip::from(&mut g)
            .and(&p)
            .and(w)
            .for_each(|g, &p, &w| *g = (wsum * p - w) / b);
    }
    Ok(LossOutput {
        loss: loss / b,
        grad,
        warnings,
    })
}

/// ψ(x) = 1/(1+eˣ).
pub fn psi(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// LWS weights from current probabilities: p normalized within S for z∈S and
/// within the complement for z∉S. Complement weights are zero when S is full.
pub fn lws_weights(logits: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Array2<f64> {
    let mut w = Array2::zeros(logits.raw_dim());
    for ((z, m), mut row) in logits
        .outer_iter()
        .zip(mask.outer_iter())
        .zip(w.outer_iter_mut())
    {
        let inside = math::masked_softmax_row(z, m);
        let comp: Array1<bool> = m.mapv(|b| !b);
        let outside = if comp.iter().any(|&b| b) {
            math::masked_softmax_row(z, comp.view())
        } else {
            Array1::zeros(z.len())
        };
        row.assign(&(&inside + &outside));
    }
    w
}

/// LWS: Σ_{z∈S} w_z ψ(g_z) + β Σ_{z∉S} w_z ψ(−g_z), weights held fixed.
pub fn loss_lws(
    logits: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    beta: f64,
    weights: ArrayView2<'_, f64>,
) -> Result<LossOutput> {
    check(logits, mask)?;
    if !(beta >= 0.0) {
        return Err(Error::config(format!("LWS beta must be >= 0, got {beta}")));
    }
    if weights.dim() != logits.dim() {
        return Err(Error::shape("LWS weights must match the logits"));
    }
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    Zip::from(&mut grad)
        .and(logits)
        .and(mask)
        .and(weights)
        .for_each(|g, &z, &m, &w| {
            if m {
                let s = psi(z);
                loss += w * s;
                *g = -w * s * (1.0 - s) / b;
            } else {
                let s = psi(-z);
                loss += beta * w * s;
                *g = beta * w * s * (1.0 - s) / b;
            }
        });
    Ok(LossOutput {
        loss: loss / b,
        grad,
        warnings: 0,
    })
}

/// Class with the largest logit inside S, ties to the smaller index.
pub fn cavl_targets(logits: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Vec<usize> {
    logits
        .outer_iter()
        .zip(mask.outer_iter())
        .map(|(z, m)| {
            let mut best: Option<usize> = None;
            for j in 0..z.len() {
                if m[j] && best.is_none_or(|b| z[j] > z[b]) {
                    best = Some(j);
                }
            }
            best.expect("non-empty candidate row")
        })
        .collect()
}

/// CAVL: cross-entropy to the detached argmax within S.
pub fn loss_cavl(logits: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<LossOutput> {
    check(logits, mask)?;
    cross_entropy(logits, &cavl_targets(logits, mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AbsKind {
    Mae,
    Gce { q: f64 },
}

/// Average-based strategy: (1/|S|) Σ_{j∈S} ℓ(p, e_j).
pub fn loss_abs(
    logits: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    kind: AbsKind,
) -> Result<LossOutput> {
    check(logits, mask)?;
    if let AbsKind::Gce { q } = kind {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::config(format!("GCE q must lie in (0, 1], got {q}")));
        }
    }
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((z, m), mut g) in logits
        .outer_iter()
        .zip(mask.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let p = math::softmax_row(z);
        let size = m.iter().filter(|&&x| x).count() as f64;
        // a_j = dℓ_j/dp_j; dℓ_j/dz_k = a_j p_j (δ_jk − p_k)
        let (row_loss, a_times_p): (f64, Array1<f64>) = match kind {
            AbsKind::Mae => {
                let l = m
                    .iter()
                    .zip(&p)
                    .filter(|(&mj, _)| mj)
                    .map(|(_, &pj)| 2.0 * (1.0 - pj))
                    .sum::<f64>();
                (
                    l,
                    Zip::from(&p)
                        .and(m)
                        .map_collect(|&pj, &mj| if mj { -2.0 * pj } else { 0.0 }),
                )
            }
            AbsKind::Gce { q } => {
                let l = m
                    .iter()
                    .zip(&p)
                    .filter(|(&mj, _)| mj)
                    .map(|(_, &pj)| -(q * pj.max(PROB_FLOOR).ln()).exp_m1() / q)
                    .sum::<f64>();
                (
                    l,
                    Zip::from(&p)
                        .and(m)
                        .map_collect(|&pj, &mj| if mj { -pj.powf(q) } else { 0.0 }),
                )
            }
        };
        loss += row_loss / size;
        let total = a_times_p.sum();
        Zip::from(&mut g)
            .and(&a_times_p)
            .and(&p)
            .for_each(|g, &ap, &pk| *g = (ap - pk * total) / size / b);
    }
    Ok(LossOutput {
        loss: loss / b,
        grad,
        warnings: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrdOutput {
    pub loss: f64,
    /// Gradient with respect to the first view's logits.
    pub grad_a: Array2<f64>,
    /// Gradient with respect to the second view's logits.
    pub grad_b: Array2<f64>,
    pub supervised: f64,
    pub consistency: f64,
    pub warnings: usize,
}

/// Σ_{j∉S} −log(1 − p_j) for one row, plus its logit gradient.
fn exclusion_term(z: ArrayView1<'_, f64>, m: ArrayView1<'_, bool>) -> (f64, Array1<f64>, bool) {
    let p = math::softmax_row(z);
    let mut loss = 0.0;
    let mut ratio_sum = 0.0;
    let mut clamped = false;
    let mut ratio = Array1::zeros(z.len());
    for j in 0..z.len() {
        if !m[j] {
            let rest = 1.0 - p[j];
            if rest < PROB_FLOOR {
                clamped = true;
            }
            let rest = rest.max(PROB_FLOOR);
            loss -= rest.ln();
            ratio[j] = p[j] / rest;
            ratio_sum += ratio[j];
        }
    }
    let grad = &ratio - &(&p * ratio_sum);
    (loss, grad, clamped)
}

/// Two-view consistency loss: the non-candidate exclusion term averaged over
/// both views plus λ·KL(p⁺|_S ‖ p⁻|_S), gradients through both views.
pub fn loss_crd(
    logits_a: ArrayView2<'_, f64>,
    logits_b: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    lambda: f64,
) -> Result<CrdOutput> {
    check(logits_a, mask)?;
    check(logits_b, mask)?;
    if !(lambda >= 0.0) {
        return Err(Error::config(format!(
            "CRD lambda must be >= 0, got {lambda}"
        )));
    }
    let b = logits_a.nrows() as f64;
    let mut grad_a = Array2::zeros(logits_a.raw_dim());
    let mut grad_b = Array2::zeros(logits_b.raw_dim());
    let (mut supervised, mut consistency, mut warnings) = (0.0, 0.0, 0);
    for i in 0..logits_a.nrows() {
        let (za, zb, m) = (logits_a.row(i), logits_b.row(i), mask.row(i));
        let (la, ga, ca) = exclusion_term(za, m);
        let (lb, gb, cb) = exclusion_term(zb, m);
        supervised += 0.5 * (la + lb);
        warnings += usize::from(ca || cb);

        let qa = math::masked_softmax_row(za, m);
        let qb = math::masked_softmax_row(zb, m);
        let (lse_a, lse_b) = (math::masked_logsumexp(za, m), math::masked_logsumexp(zb, m));
        let mut r = Array1::zeros(za.len());
        let mut kl = 0.0;
        for j in 0..za.len() {
            if m[j] {
                r[j] = (za[j] - lse_a) - (zb[j] - lse_b);
                kl += qa[j] * r[j];
            }
        }
        consistency += kl;
        // dKL/dza_k = qa_k (r_k − KL); dKL/dzb_k = qb_k − qa_k, both zero off S
        let dkl_a = Zip::from(&qa).and(&r).map_collect(|&q, &rj| q * (rj - kl));
        let dkl_b = &qb - &qa;
        grad_a
            .row_mut(i)
            .assign(&((&ga * 0.5 + &dkl_a * lambda) / b));
        grad_b
            .row_mut(i)
            .assign(&((&gb * 0.5 + &dkl_b * lambda) / b));
    }
    supervised /= b;
    consistency /= b;
    Ok(CrdOutput {
        loss: supervised + lambda * consistency,
        grad_a,
        grad_b,
        supervised,
        consistency,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Logits whose softmax is exactly `p`.
    fn logits_for(p: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, p.len()), p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    fn mask(k: usize, rows: &[&[usize]]) -> Array2<bool> {
        Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i].contains(&j))
    }

    #[test]
    fn cc_hand_value() {
        let out = loss_cc(
            logits_for(&[0.2, 0.3, 0.5]).view(),
            mask(3, &[&[0, 1]]).view(),
        )
        .unwrap();
        assert_abs_diff_eq!(out.loss, -(0.5f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cc_full_set_is_zero() {
        let out = loss_cc(
            array![[0.3, -1.0, 2.0]].view(),
            mask(3, &[&[0, 1, 2]]).view(),
        )
        .unwrap();
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn cc_singleton_is_cross_entropy() {
        let z = array![[0.3, -1.0, 2.0]];
        let cc = loss_cc(z.view(), mask(3, &[&[2]]).view()).unwrap();
        let ce = cross_entropy(z.view(), &[2]).unwrap();
        assert_abs_diff_eq!(cc.loss, ce.loss, epsilon = 1e-12);
    }

    #[test]
    fn cc_flags_underflow() {
        let out = loss_cc(array![[0.0, 100.0]].view(), mask(2, &[&[0]]).view()).unwrap();
        assert_eq!(out.warnings, 1);
        assert_abs_diff_eq!(out.loss, -(1e-12f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn weighted_ce_uniform_is_log_k() {
        let out = loss_weighted_ce(
            Array2::zeros((1, 6)).view(),
            Array2::from_elem((1, 6), 1.0 / 6.0).view(),
        )
        .unwrap();
        assert_abs_diff_eq!(out.loss, 6f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn psi_at_zero() {
        assert_eq!(psi(0.0), 0.5);
        assert!(psi(1.0) < psi(0.0) && psi(-1.0) > psi(0.0));
    }

    #[test]
    fn lws_singleton_beta_zero() {
        let m = mask(3, &[&[1]]);
        let losses: Vec<f64> = [-1.0, 0.0, 2.0]
            .iter()
            .map(|&g| {
                let z = array![[0.4, g, -0.3]];
                let w = lws_weights(z.view(), m.view());
                let out = loss_lws(z.view(), m.view(), 0.0, w.view()).unwrap();
                assert_abs_diff_eq!(out.loss, psi(g), epsilon = 1e-15);
                out.loss
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
    }

    #[test]
    fn lws_full_set_has_no_complement_term() {
        let z = array![[0.4, 1.0]];
        let m = mask(2, &[&[0, 1]]);
        let w = lws_weights(z.view(), m.view());
        let a = loss_lws(z.view(), m.view(), 0.0, w.view()).unwrap();
        let b = loss_lws(z.view(), m.view(), 5.0, w.view()).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn cavl_selects_within_s() {
        let z = array![[1.0, 2.0, 3.0]];
        assert_eq!(cavl_targets(z.view(), mask(3, &[&[0, 1]]).view()), vec![1]);
        let out = loss_cavl(z.view(), mask(3, &[&[0, 1]]).view()).unwrap();
        assert_abs_diff_eq!(
            out.loss,
            cross_entropy(z.view(), &[1]).unwrap().loss,
            epsilon = 1e-15
        );
        assert_eq!(
            cavl_targets(array![[2.0, 2.0, 0.0]].view(), mask(3, &[&[0, 1]]).view()),
            vec![0]
        );
    }

    #[test]
    fn abs_mae_hand_value() {
        let out = loss_abs(
            logits_for(&[0.2, 0.3, 0.5]).view(),
            mask(3, &[&[0, 1]]).view(),
            AbsKind::Mae,
        )
        .unwrap();
        assert_abs_diff_eq!(out.loss, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn abs_gce_limits() {
        let z = logits_for(&[0.2, 0.3, 0.5]);
        let m = mask(3, &[&[0, 1]]);
        let gce = loss_abs(z.view(), m.view(), AbsKind::Gce { q: 1.0 }).unwrap();
        let mae = loss_abs(z.view(), m.view(), AbsKind::Mae).unwrap();
        assert_abs_diff_eq!(gce.loss, mae.loss / 2.0, epsilon = 1e-12);
        let perfect = loss_abs(
            array![[50.0, 0.0]].view(),
            mask(2, &[&[0]]).view(),
            AbsKind::Gce { q: 0.7 },
        )
        .unwrap();
        assert!(perfect.loss.abs() < 1e-15);
    }

    #[test]
    fn crd_neutral_cases() {
        let z = array![[0.2, -0.4, 1.0, 0.3]];
        let m = mask(4, &[&[0, 2]]);
        let same = loss_crd(z.view(), z.view(), m.view(), 1.0).unwrap();
        assert!(same.consistency.abs() < 1e-15);
        let (excl, _, _) = exclusion_term(z.row(0), m.row(0));
        assert_abs_diff_eq!(same.loss, excl, epsilon = 1e-12);
        let full = loss_crd(
            z.view(),
            (&z + 0.5).view(),
            mask(4, &[&[0, 1, 2, 3]]).view(),
            0.0,
        )
        .unwrap();
        assert_eq!(full.supervised, 0.0);
    }
}
