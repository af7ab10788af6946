//! Task-aligned rewriting of electronic health records for clinical prediction.
//!
//! Candidate rewrites come from eight feature-selection operators, are
//! filtered by a task scorer, distilled into a mask policy, and aligned to a
//! hashed-text predictor with classifier-weighted KL training. Inference mixes
//! predictions on the original and rewritten records.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cohort;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod math;
pub mod pipeline;
pub mod predictor;
pub mod rewriter;
pub mod seed;
pub mod select;
pub mod synth;

pub use ehr::{
    is_subset, token_length, validate_ehr, verbalize, FeatureCatalog, FeatureId, FeatureInfo, FeatureValueTuple, Modality,
    PatientEhr, Rewrite, RewriteSource, ValidationReport, Value, ValueKind, VerbalizedEhr, Violation, Visit,
};
pub use cohort::{Cohort, CohortRecord, Latent};
pub use error::{Error, Result};
pub use eval::{InferenceConfig, MetricReport};
pub use predictor::{PredictorModel, TrainConfig};
pub use rewriter::RewriterPolicy;
pub use select::{apply_operator, OperatorConfig, OperatorContext, OperatorId, ScoreTables};
