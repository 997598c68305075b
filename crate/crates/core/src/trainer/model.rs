use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, domain};

pub const DEFAULT_SIGMA: f64 = 25.0;
pub const DEFAULT_ADAPTER_SCALE: f64 = 0.1;

/// σ·cos(w_j, f) scoring head with no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    /// K×d class directions (not necessarily unit length).
    pub weights: Array2<f64>,
    pub sigma: f64,
}

fn l2_normalized_rows(m: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = m.outer_iter().map(math::norm).collect();
    let mut unit = m.to_owned();
    for (mut row, &n) in unit.outer_iter_mut().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    (unit, norms)
}

impl CosineClassifier {
    /// Random unit directions.
    pub fn random(k: usize, d: usize, sigma: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = rng::stream(seed, domain::INIT, 0);
        let w = Array2::from_shape_simple_fn((k, d), || normal.sample(&mut rng));
        Self {
            weights: l2_normalized_rows(w.view()).0,
            sigma,
        }
    }

    /// W_j = t_j / ‖t_j‖ from class text embeddings.
    pub fn from_text(text: &FeatureMatrix, sigma: f64) -> Result<Self> {
        let t = text.to_f64();
        let (unit, norms) = l2_normalized_rows(t.view());
        if let Some(j) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::config(format!(
                "text embedding for class {j} is the zero vector"
            )));
        }
        Ok(Self {
            weights: unit,
            sigma,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }

    /// B×K logits; zero-norm feature rows score 0 everywhere.
    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        let (w, _) = l2_normalized_rows(self.weights.view());
        let (f, _) = l2_normalized_rows(features);
        f.dot(&w.t()) * self.sigma
    }

    pub fn logits_one(&self, feature: ArrayView1<'_, f64>) -> Array1<f64> {
        self.logits(feature.insert_axis(Axis(0))).row(0).to_owned()
    }

    /// Gradients of a loss with respect to W and to the input features, given
    /// dL/dlogits.
    pub fn backward(
        &self,
        features: ArrayView2<'_, f64>,
        grad_logits: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (w_hat, w_norm) = l2_normalized_rows(self.weights.view());
        let (f_hat, f_norm) = l2_normalized_rows(features);
        let cos = f_hat.dot(&w_hat.t());
        let s = self.sigma;

        // dlogit_bj/dW_j = σ (f̂_b − cos_bj ŵ_j) / ‖W_j‖
        let gc = &grad_logits * s;
        let mut grad_w = gc.t().dot(&f_hat);
        let scaled = (&gc * &cos).sum_axis(Axis(0));
        for (j, mut row) in grad_w.outer_iter_mut().enumerate() {
            row.scaled_add(-scaled[j], &w_hat.row(j));
            if w_norm[j] > 0.0 {
                row /= w_norm[j];
            }
        }

        // dlogit_bj/df_b = σ (ŵ_j − cos_bj f̂_b) / ‖f_b‖
        let mut grad_f = gc.dot(&w_hat);
        let per_row = (&gc * &cos).sum_axis(Axis(1));
        for (b, mut row) in grad_f.outer_iter_mut().enumerate() {
            row.scaled_add(-per_row[b], &f_hat.row(b));
            if f_norm[b] > 0.0 {
                row /= f_norm[b];
            } else {
                row.fill(0.0);
            }
        }
        (grad_w, grad_f)
    }
}

/// Residual bottleneck on frozen features: f + s·W_up·relu(W_down·f).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAdapter {
    /// r×d
    pub down: Array2<f64>,
    /// d×r
    pub up: Array2<f64>,
    pub scale: f64,
}

/// clamp(2^⌊log₂(K/2)⌋, 4, d/2), never below 1.
pub fn default_bottleneck(k: usize, d: usize) -> usize {
    let half = (k as f64 / 2.0).max(1.0);
    let pow = 1usize << (half.log2().floor() as u32);
    pow.max(4).min((d / 2).max(1))
}

pub struct AdapterCache {
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeatureAdapter {
    /// Kaiming-style W_down, zero W_up: the identity map at initialisation.
    pub fn new(d: usize, rank: usize, scale: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
        let mut rng = rng::stream(seed, domain::INIT, 1);
        Self {
            down: Array2::from_shape_simple_fn((rank, d), || normal.sample(&mut rng)),
            up: Array2::zeros((d, rank)),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(features).0
    }

    pub fn forward_cached(&self, features: ArrayView2<'_, f64>) -> (Array2<f64>, AdapterCache) {
        let pre_activation = features.dot(&self.down.t());
        let hidden = pre_activation.mapv(|v| v.max(0.0));
        let out = &features + &(hidden.dot(&self.up.t()) * self.scale);
        (
            out,
            AdapterCache {
                pre_activation,
                hidden,
            },
        )
    }

    /// (dL/dW_down, dL/dW_up) from dL/d(output).
    pub fn backward(
        &self,
        features: ArrayView2<'_, f64>,
        cache: &AdapterCache,
        grad_out: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let grad_up = grad_out.t().dot(&cache.hidden) * self.scale;
        let mut grad_hidden = grad_out.dot(&self.up) * self.scale;
        Zip::from(&mut grad_hidden)
            .and(&cache.pre_activation)
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
        let grad_down = grad_hidden.t().dot(&features);
        (grad_down, grad_up)
    }
}

/// Optional adapter followed by the cosine head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub classifier: CosineClassifier,
    pub adapter: Option<FeatureAdapter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub weights: Array2<f64>,
    pub adapter: Option<(Array2<f64>, Array2<f64>)>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            weights: Array2::zeros(model.classifier.weights.raw_dim()),
            adapter: model.adapter.as_ref().map(|a| {
                (
                    Array2::zeros(a.down.raw_dim()),
                    Array2::zeros(a.up.raw_dim()),
                )
            }),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.weights += &other.weights;
        if let (Some((d, u)), Some((od, ou))) = (self.adapter.as_mut(), other.adapter.as_ref()) {
            *d += od;
            *u += ou;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
            && self
                .adapter
                .as_ref()
                .is_none_or(|(d, u)| d.iter().chain(u.iter()).all(|v| v.is_finite()))
    }
}

impl Model {
    pub fn k(&self) -> usize {
        self.classifier.k()
    }

    pub fn d(&self) -> usize {
        self.classifier.d()
    }

    /// Adapter output (the classifier's input features).
    pub fn embed(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.adapter {
            Some(a) => a.forward(features),
            None => features.to_owned(),
        }
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        self.classifier.logits(self.embed(features).view())
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(features)
            .outer_iter()
            .map(math::argmax)
            .collect()
    }

    /// Forward pass keeping what [`Model::backward`] needs.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Forward {
        match &self.adapter {
            Some(a) => {
                let (embedded, cache) = a.forward_cached(features);
                let logits = self.classifier.logits(embedded.view());
                Forward {
                    input: features.to_owned(),
                    embedded,
                    cache: Some(cache),
                    logits,
                }
            }
            None => {
                let logits = self.classifier.logits(features);
                Forward {
                    input: features.to_owned(),
                    embedded: features.to_owned(),
                    cache: None,
                    logits,
                }
            }
        }
    }

    pub fn backward(&self, fwd: &Forward, grad_logits: ArrayView2<'_, f64>) -> ModelGrads {
        let (gw, gf) = self.classifier.backward(fwd.embedded.view(), grad_logits);
        let adapter = match (&self.adapter, &fwd.cache) {
            (Some(a), Some(cache)) => Some(a.backward(fwd.input.view(), cache, gf.view())),
            _ => None,
        };
        ModelGrads {
            weights: gw,
            adapter,
        }
    }
}

pub struct Forward {
    pub input: Array2<f64>,
    pub embedded: Array2<f64>,
    cache: Option<AdapterCache>,
    pub logits: Array2<f64>,
}
