//! Gaussian-blob fixtures standing in for frozen embeddings.
//!
//! Class c is centred on `separation·noise/√2 · e_c` (plus an optional shared
//! offset along the all-ones direction), so every pair of class means is
//! `separation` noise-standard-deviations apart.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::data::{CandidateMatrix, FeatureMatrix, LabelSpace, PLLDataset};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub k: usize,
    pub d: usize,
    pub per_class: usize,
    /// Distance between class means, in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    /// Norm of a component shared by all class means.
    pub offset: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Blobs {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    /// K×d class centres.
    pub means: Array2<f64>,
}

impl Blobs {
    pub fn into_dataset(self, candidates: CandidateMatrix) -> Result<PLLDataset> {
        let k = self.means.nrows();
        PLLDataset::new(
            LabelSpace::new(k)?,
            self.features,
            candidates,
            Some(self.labels),
        )
    }

    /// Singleton candidate sets {y_i}: the fully supervised view.
    pub fn supervised_candidates(&self) -> CandidateMatrix {
        let rows: Vec<[usize; 1]> = self.labels.iter().map(|&y| [y]).collect();
        CandidateMatrix::from_rows(self.means.nrows(), &rows).expect("labels < K")
    }

    pub fn supervised_dataset(&self) -> Result<PLLDataset> {
        self.clone().into_dataset(self.supervised_candidates())
    }

    pub fn split(&self) -> crate::trainer::EvalSplit<'_> {
        crate::trainer::EvalSplit {
            features: &self.features,
            labels: &self.labels,
        }
    }
}

pub fn blob_means(
    k: usize,
    d: usize,
    separation: f64,
    noise: f64,
    offset: f64,
) -> Result<Array2<f64>> {
    if d < k {
        return Err(Error::config(format!(
            "blob fixture needs d >= K (d={d}, K={k})"
        )));
    }
    let radius = separation * noise / std::f64::consts::SQRT_2;
    let shared = offset / (d as f64).sqrt();
    Ok(Array2::from_shape_fn((k, d), |(c, j)| {
        if c == j {
            radius + shared
        } else {
            shared
        }
    }))
}

/// Class means plus N(0, σ²) noise per coordinate, standing in for text
/// embeddings of the class names.
pub fn noisy_text(means: &Array2<f64>, sigma: f64, seed: u64) -> FeatureMatrix {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and >= 0");
    let mut rng = rng::stream(seed, domain::AUX, 0);
    let noisy = means.mapv(|v| v + normal.sample(&mut rng));
    FeatureMatrix::from_f64(&noisy).expect("finite text embeddings")
}

/// Samples `per_class` points per class; row i has label i mod K.
pub fn gaussian_blobs(spec: &BlobSpec) -> Blobs {
    let means = blob_means(spec.k, spec.d, spec.separation, spec.noise, spec.offset)
        .expect("blob spec needs d >= K");
    let n = spec.k * spec.per_class;
    let normal = Normal::new(0.0, spec.noise).expect("noise must be finite and >= 0");
    let mut features = Array2::<f64>::zeros((n, spec.d));
    let labels: Vec<usize> = (0..n).map(|i| i % spec.k).collect();
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let mut rng = rng::stream(spec.seed, domain::SYNTH, i as u64);
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[[labels[i], j]] + normal.sample(&mut rng);
        }
    }
    Blobs {
        features: FeatureMatrix::from_f64(&features).expect("finite samples"),
        labels,
        means,
    }
}
