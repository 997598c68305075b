//! Partial-label learning on frozen embeddings: candidate-set generation,
//! zero-shot candidate filtering, disambiguation objectives, a cosine-head
//! trainer and evaluation metrics.

// `!(x >= lo)` style range checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod genlab;
pub mod math;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod zsfilter;

pub use data::{
    CandidateMatrix, ConfidenceMatrix, FeatureMatrix, LabelSpace, PLLDataset, ValidationReport,
};
pub use error::{Error, FormatError, Result};
pub use eval::MetricBlock;
pub use genlab::{GenSpec, LongTailSpec, Strategy};
pub use objectives::{ObjectiveKind, ObjectiveState};
pub use trainer::{fit, FitInputs, Model, TrainConfig, TrainReport};
pub use zsfilter::FilterSpec;
