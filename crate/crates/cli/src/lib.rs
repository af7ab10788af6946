//! Staged runner for the ehr-rewrite pipeline.
//!
//! Each stage reads its inputs from a workdir, writes its outputs next to a
//! manifest of content hashes, and is skipped when that manifest still
//! matches. Shared stages live in the workdir root; mode-specific ones under
//! `modes/<mode>/`.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
pub use stages::{run_pipeline, run_stage, run_stages, EvaluationRecord, Outcome, Stage, SweepAxis};
