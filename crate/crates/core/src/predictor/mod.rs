//! Clinical predictor and task scorer: hashed n-gram text features with a
//! logistic or single-hidden-layer head, trained on binary cross-entropy.

pub mod hashing;
pub mod linear;
mod model;

pub use hashing::{encode, hashed_counts, SparseVector, DEFAULT_HASH_DIM};
pub use model::{
    encode_examples, fit, inoculate, train, Architecture, BatchGradient, Encoded, InoculationConfig,
    PredictorModel, TrainConfig, TrainingMeta,
};
