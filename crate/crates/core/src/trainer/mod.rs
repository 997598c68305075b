//! Cosine-head training on frozen features.

mod checkpoint;
mod fit;
mod model;
mod sgd;

pub use checkpoint::{decode_model, encode_model, read_model_file, write_model_file, MODEL_MAGIC};
pub use fit::{
    fit, init_model, predict, predict_logits, EpochRecord, EvalSplit, FitInputs, TrainConfig,
    TrainReport,
};
pub use model::{
    default_bottleneck, CosineClassifier, FeatureAdapter, Forward, Model, ModelGrads,
    DEFAULT_ADAPTER_SCALE, DEFAULT_SIGMA,
};
pub use sgd::{sgd_step, SgdConfig};

use crate::data::FeatureMatrix;
use crate::error::Result;

/// Cosine classifier with W_j = t_j/‖t_j‖ and the default scale.
pub fn init_text_classifier(text: &FeatureMatrix) -> Result<CosineClassifier> {
    CosineClassifier::from_text(text, DEFAULT_SIGMA)
}
