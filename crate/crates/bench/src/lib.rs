//! Shared inputs for the kernel benchmarks.

use pllkit::data::{CandidateMatrix, ConfidenceMatrix, FeatureMatrix};
use pllkit::genlab::gen_fps;
use pllkit::synth::{gaussian_blobs, BlobSpec, Blobs};
use pllkit::zsfilter::{zeroshot_confidence, DEFAULT_TEMPERATURE};

pub struct Fixture {
    pub blobs: Blobs,
    pub candidates: CandidateMatrix,
    pub text: FeatureMatrix,
    pub confidences: ConfidenceMatrix,
}

/// Blob features, FPS candidates and zero-shot confidences against the class means.
pub fn fixture(k: usize, d: usize, per_class: usize, eta: f64) -> Fixture {
    let blobs = gaussian_blobs(&BlobSpec {
        k,
        d,
        per_class,
        separation: 4.0,
        noise: 1.0,
        offset: 0.0,
        seed: 0,
    });
    let candidates = gen_fps(&blobs.labels, k, eta, 1).expect("valid FPS parameters");
    let text = FeatureMatrix::from_f64(&blobs.means).expect("finite means");
    let confidences = zeroshot_confidence(&blobs.features, &text, DEFAULT_TEMPERATURE)
        .expect("non-zero features");
    Fixture {
        blobs,
        candidates,
        text,
        confidences,
    }
}
