use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// v ← μ·v + g + wd·θ; θ ← θ − lr·v. The velocity starts at zero.
///
/// Nothing is modified when `grad` holds a non-finite value.
pub fn sgd_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    velocity: &mut Array2<f64>,
    cfg: &SgdConfig,
) -> Result<()> {
    if param.dim() != grad.dim() || param.dim() != velocity.dim() {
        return Err(Error::shape(format!(
            "sgd shapes disagree: param {:?}, grad {:?}, velocity {:?}",
            param.dim(),
            grad.dim(),
            velocity.dim()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient"));
    }
    Zip::from(&mut *param)
        .and(&mut *velocity)
        .and(grad)
        .for_each(|p, v, &g| {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
            *p -= cfg.lr * *v;
        });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn plain_descent_when_no_momentum() {
        let mut p = array![[1.0, -2.0]];
        let mut v = Array2::zeros((1, 2));
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &array![[2.0, 2.0]], &mut v, &cfg).unwrap();
        assert_eq!(p, array![[0.0, -3.0]]);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = array![[1.5, 0.25]];
        let mut v = Array2::zeros((1, 2));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        for _ in 0..5 {
            sgd_step(&mut p, &Array2::zeros((1, 2)), &mut v, &cfg).unwrap();
        }
        assert_eq!(p, array![[1.5, 0.25]]);
    }

    #[test]
    fn heavy_ball_on_quadratic_bowl() {
        // scalar recurrence per coordinate as the oracle
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = array![[3.0, -4.0]];
        let mut v = Array2::zeros((1, 2));
        let (mut x, mut vx) = (3.0f64, 0.0f64);
        let mut norms = Vec::new();
        for _ in 0..60 {
            let g = &p * 2.0;
            sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
            vx = 0.9 * vx + 2.0 * x;
            x -= 0.1 * vx;
            assert!((p[[0, 0]] - x).abs() < 1e-12);
            norms.push(p.iter().map(|t| t * t).sum::<f64>().sqrt());
        }
        // complex eigenvalues of modulus sqrt(0.9): the norm rings, but its
        // envelope over each 10-step window shrinks
        let peaks: Vec<f64> = norms
            .chunks(10)
            .map(|c| c.iter().cloned().fold(0.0, f64::max))
            .collect();
        for w in peaks.windows(2) {
            assert!(w[1] < w[0], "{peaks:?}");
        }
        assert!(norms[2] < norms[1] && norms[3] > norms[2]);
    }

    #[test]
    fn nonfinite_grad_rejected() {
        let mut p = array![[1.0]];
        let mut v = array![[0.0]];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let err = sgd_step(&mut p, &array![[f64::NAN]], &mut v, &cfg).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(p, array![[1.0]]);
    }
}
