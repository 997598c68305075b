//! Small numeric kernels on f64 rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn logsumexp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-sum-exp over the entries where `mask` is set.
pub fn masked_logsumexp(row: ArrayView1<'_, f64>, mask: ArrayView1<'_, bool>) -> f64 {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum::<f64>()
        .ln()
}

pub fn softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = logsumexp(row);
    row.mapv(|v| (v - lse).exp())
}

pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&softmax_row(src));
    }
    out
}

/// Softmax restricted to the masked entries; zero elsewhere.
pub fn masked_softmax_row(row: ArrayView1<'_, f64>, mask: ArrayView1<'_, bool>) -> Array1<f64> {
    let lse = masked_logsumexp(row, mask);
    let mut out = Array1::zeros(row.len());
    Zip::from(&mut out)
        .and(row)
        .and(mask)
        .for_each(|o, &v, &m| {
            if m {
                *o = (v - lse).exp();
            }
        });
    out
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}
