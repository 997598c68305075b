//! Entropic optimal-transport pseudo-labels (Sinkhorn-Knopp scaling).
//!
//! Given model probabilities restricted to the candidate sets, find the plan
//! Q = diag(u)·K·diag(v) with K = M^(1/eps) whose rows each carry mass 1/B
//! and whose columns follow the class prior r. Q is zero off the candidate
//! support by construction. All scaling happens in log space on the dual
//! potentials f = eps·log u and g = eps·log v.
//!
//! Small eps makes the kernel very peaked and plain scaling slow. The first
//! half of the iteration budget therefore anneals eps geometrically from
//! `ANNEAL_START` down to the target, warm-starting each step from the last
//! potentials; the second half runs at the target eps only. The fixed point
//! is the target-eps plan either way.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::math::PROB_FLOOR;

pub const DEFAULT_EPS: f64 = 0.05;
pub const DEFAULT_ITERS: usize = 100;
pub const ANNEAL_START: f64 = 1.0;
/// Early-stop threshold on the max absolute marginal residual.
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutput {
    /// B×K transport plan; total mass 1.
    pub q: Array2<f64>,
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations: usize,
    /// Classes with prior mass but no candidate support in this batch.
    pub dropped_columns: Vec<usize>,
    /// The prior actually used after dropping unsupported columns.
    pub prior: Array1<f64>,
}

impl SinkhornOutput {
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    /// Rows rescaled to sum to one, usable as soft targets.
    pub fn targets(&self) -> Array2<f64> {
        let mut t = self.q.clone();
        for mut row in t.outer_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        t
    }
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sinkhorn_assign(
    probs: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    prior: ArrayView1<'_, f64>,
    eps: f64,
    iters: usize,
) -> Result<SinkhornOutput> {
    let (b, k) = probs.dim();
    if mask.dim() != (b, k) || prior.len() != k {
        return Err(Error::shape(format!(
            "sinkhorn inputs disagree: probs {:?}, mask {:?}, prior {}",
            probs.dim(),
            mask.dim(),
            prior.len()
        )));
    }
    if b == 0 {
        return Err(Error::shape("empty minibatch"));
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "sinkhorn eps must be positive, got {eps}"
        )));
    }
    if prior.iter().any(|&r| !(r >= 0.0)) || !(prior.sum() > 0.0) {
        return Err(Error::numerical(
            "sinkhorn prior must be non-negative with positive mass",
        ));
    }

    let supported: Vec<bool> = (0..k).map(|j| (0..b).any(|i| mask[[i, j]])).collect();
    let dropped_columns: Vec<usize> = (0..k)
        .filter(|&j| prior[j] > 0.0 && !supported[j])
        .collect();
    // Supported columns with zero prior keep a vanishing share so rows that
    // only reach them stay feasible.
    let mut r = Array1::from_shape_fn(k, |j| {
        if supported[j] {
            prior[j].max(PROB_FLOOR)
        } else {
            0.0
        }
    });
    r /= r.sum();

    // log M on the support, -inf elsewhere
    let mut log_m = Array2::from_elem((b, k), f64::NEG_INFINITY);
    for i in 0..b {
        let row_mass: f64 = (0..k)
            .filter(|&j| mask[[i, j]])
            .map(|j| probs[[i, j]].max(0.0))
            .sum();
        let size = mask.row(i).iter().filter(|&&m| m).count() as f64;
        if size == 0.0 {
            return Err(Error::shape(format!(
                "empty candidate set in batch row {i}"
            )));
        }
        for j in 0..k {
            if mask[[i, j]] {
                let m = if row_mass > 0.0 {
                    probs[[i, j]].max(0.0) / row_mass
                } else {
                    1.0 / size
                };
                log_m[[i, j]] = m.max(PROB_FLOOR).ln();
            }
        }
    }

    let iters = iters.max(1);
    let anneal_steps = iters / 2;
    let start = ANNEAL_START.max(eps);
    let decay = if anneal_steps > 0 {
        (eps / start).powf(1.0 / anneal_steps as f64)
    } else {
        1.0
    };
    let mut cur = if anneal_steps > 0 { start } else { eps };

    let log_row_target = -(b as f64).ln();
    let log_r = r.mapv(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    let mut log_kernel = log_m.mapv(|v| v / cur);
    let mut log_u = Array1::<f64>::zeros(b);
    let mut log_v = Array1::<f64>::zeros(k);
    let mut q = Array2::zeros((b, k));
    let mut iterations = 0;
    let (mut row_residual, mut col_residual) = (f64::INFINITY, f64::INFINITY);

    for t in 0..iters {
        iterations += 1;
        let next = if t + 1 >= anneal_steps {
            eps
        } else {
            (cur * decay).max(eps)
        };
        for j in 0..k {
            log_v[j] = if supported[j] {
                log_r[j] - lse((0..b).map(|i| log_kernel[[i, j]] + log_u[i]))
            } else {
                f64::NEG_INFINITY
            };
        }
        for i in 0..b {
            log_u[i] = log_row_target - lse((0..k).map(|j| log_kernel[[i, j]] + log_v[j]));
        }
        if cur > eps {
            // keep the potentials eps·log u and eps·log v across the step
            let ratio = cur / next;
            log_u *= ratio;
            log_v *= ratio;
            cur = next;
            log_kernel = log_m.mapv(|v| v / cur);
            continue;
        }
        for i in 0..b {
            for j in 0..k {
                let lq = log_u[i] + log_kernel[[i, j]] + log_v[j];
                q[[i, j]] = if lq == f64::NEG_INFINITY || lq.is_nan() {
                    0.0
                } else {
                    lq.exp()
                };
            }
        }
        row_residual = q
            .outer_iter()
            .map(|row| (row.sum() - 1.0 / b as f64).abs())
            .fold(0.0, f64::max);
        col_residual = (0..k)
            .map(|j| (q.column(j).sum() - r[j]).abs())
            .fold(0.0, f64::max);
        if row_residual.max(col_residual) < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(SinkhornOutput {
        q,
        row_residual,
        col_residual,
        iterations,
        dropped_columns,
        prior: r,
    })
}
