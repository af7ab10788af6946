//! The eight paraphrase operators and the feature-relevance scorers behind the
//! data-driven ones.
//!
//! Every operator returns a [`Rewrite`] holding indices into the source EHR, so
//! the output is a subset of the input tuples by construction.

pub mod encoding;
pub mod mi;
mod mrmr;
mod rfe;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::ehr::{FeatureCatalog, FeatureId, PatientEhr, Rewrite, RewriteSource, Value};
use crate::error::{Error, Result};
use crate::seed;

pub use encoding::{build_matrix, FeatureMatrix};
pub use rfe::RfeRanking;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Selection fraction in (0, 1].
    pub x_percent: f64,
    pub top_fill: usize,
    pub mi_bins: usize,
    pub rfe_step_fraction: f64,
    pub rng_seed: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            x_percent: 0.3,
            top_fill: 10,
            mi_bins: 10,
            rfe_step_fraction: 0.1,
            rng_seed: 0,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_percent > 0.0 && self.x_percent <= 1.0) {
            return Err(Error::config("x_percent", "must lie in (0, 1]"));
        }
        if self.mi_bins < 2 {
            return Err(Error::config("mi_bins", "must be at least 2"));
        }
        if !(self.rfe_step_fraction > 0.0 && self.rfe_step_fraction <= 1.0) {
            return Err(Error::config("rfe_step_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperatorId {
    Temporal,
    Abnormal,
    Mi,
    Mrmr,
    Rfe,
    RandFeature,
    RandTuple,
    Identity,
}

impl OperatorId {
    pub const ALL: [OperatorId; 8] = [
        OperatorId::Temporal,
        OperatorId::Abnormal,
        OperatorId::Mi,
        OperatorId::Mrmr,
        OperatorId::Rfe,
        OperatorId::RandFeature,
        OperatorId::RandTuple,
        OperatorId::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorId::Temporal => "TEMPORAL",
            OperatorId::Abnormal => "ABNORMAL",
            OperatorId::Mi => "MI",
            OperatorId::Mrmr => "MRMR",
            OperatorId::Rfe => "RFE",
            OperatorId::RandFeature => "RAND_FEATURE",
            OperatorId::RandTuple => "RAND_TUPLE",
            OperatorId::Identity => "IDENTITY",
        }
    }

    pub fn is_data_driven(self) -> bool {
        matches!(self, OperatorId::Mi | OperatorId::Mrmr | OperatorId::Rfe)
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorId::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("operator", format!("unknown operator `{s}`")))
    }
}

/// Per-feature relevance scores for one data-driven method. Serialised with the
/// operator config that produced it so cached tables can be checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScoreTable {
    pub method: OperatorId,
    pub scores: BTreeMap<FeatureId, f64>,
    #[serde(default)]
    pub config: OperatorConfig,
}

impl FeatureScoreTable {
    /// Scores from a ranking: best gets `n`, worst gets 1.
    pub fn from_ranking(method: OperatorId, ranking: &[FeatureId], config: &OperatorConfig) -> Self {
        let n = ranking.len();
        FeatureScoreTable {
            method,
            scores: ranking
                .iter()
                .enumerate()
                .map(|(i, f)| (f.clone(), (n - i) as f64))
                .collect(),
            config: config.clone(),
        }
    }

    /// Features ordered by descending score, ties lexical.
    pub fn ranking(&self) -> Vec<FeatureId> {
        let mut v: Vec<(&FeatureId, f64)> = self.scores.iter().map(|(f, s)| (f, *s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        v.into_iter().map(|(f, _)| f.clone()).collect()
    }
}

pub fn mutual_information_scores(
    dataset: &[(&PatientEhr, u8)],
    catalog: &FeatureCatalog,
    config: &OperatorConfig,
) -> Result<FeatureScoreTable> {
    let matrix = build_matrix(dataset, catalog)?;
    encoding::require_both_labels(&matrix.labels)?;
    Ok(mi_table(&matrix, config))
}

fn mi_table(matrix: &FeatureMatrix, config: &OperatorConfig) -> FeatureScoreTable {
    let y = mi::label_codes(&matrix.labels);
    let scores = matrix
        .features
        .iter()
        .zip(&matrix.columns)
        .map(|(f, col)| (f.clone(), mi::mutual_information(&mi::discretize(col, config.mi_bins), &y)))
        .collect();
    FeatureScoreTable {
        method: OperatorId::Mi,
        scores,
        config: config.clone(),
    }
}

pub fn mrmr_rank(
    dataset: &[(&PatientEhr, u8)],
    catalog: &FeatureCatalog,
    config: &OperatorConfig,
) -> Result<Vec<FeatureId>> {
    let matrix = build_matrix(dataset, catalog)?;
    encoding::require_both_labels(&matrix.labels)?;
    mrmr_from_matrix(&matrix, config)
}

fn mrmr_from_matrix(matrix: &FeatureMatrix, config: &OperatorConfig) -> Result<Vec<FeatureId>> {
    if matrix.features.len() < 2 {
        return Err(Error::TooFewFeatures {
            required: 2,
            found: matrix.features.len(),
        });
    }
    Ok(mrmr::rank(matrix, config.mi_bins))
}

pub fn rfe_rank(
    dataset: &[(&PatientEhr, u8)],
    catalog: &FeatureCatalog,
    config: &OperatorConfig,
) -> Result<RfeRanking> {
    let matrix = build_matrix(dataset, catalog)?;
    encoding::require_both_labels(&matrix.labels)?;
    Ok(rfe::rank(&matrix, config.rfe_step_fraction))
}

/// Score tables for the three data-driven operators, fit on one task's training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTables {
    pub task_id: String,
    pub mi: FeatureScoreTable,
    pub mrmr: FeatureScoreTable,
    pub rfe: FeatureScoreTable,
}

impl ScoreTables {
    pub fn fit(
        task_id: &str,
        dataset: &[(&PatientEhr, u8)],
        catalog: &FeatureCatalog,
        config: &OperatorConfig,
    ) -> Result<Self> {
        let matrix = build_matrix(dataset, catalog)?;
        encoding::require_both_labels(&matrix.labels)?;
        let mi = mi_table(&matrix, config);
        let mrmr = FeatureScoreTable::from_ranking(OperatorId::Mrmr, &mrmr_from_matrix(&matrix, config)?, config);
        let rfe = FeatureScoreTable::from_ranking(
            OperatorId::Rfe,
            &rfe::rank(&matrix, config.rfe_step_fraction).ranking,
            config,
        );
        Ok(ScoreTables {
            task_id: task_id.to_string(),
            mi,
            mrmr,
            rfe,
        })
    }

    pub fn get(&self, op: OperatorId) -> Option<&FeatureScoreTable> {
        match op {
            OperatorId::Mi => Some(&self.mi),
            OperatorId::Mrmr => Some(&self.mrmr),
            OperatorId::Rfe => Some(&self.rfe),
            _ => None,
        }
    }
}

/// Features scoring at or above the value at descending rank `ceil(x * n)`,
/// unioned with the global top `top_fill` features.
pub fn top_percent_select(table: &FeatureScoreTable, config: &OperatorConfig) -> BTreeSet<FeatureId> {
    let scores: Vec<f64> = table.scores.values().copied().collect();
    let Some(threshold) = crate::math::top_fraction_threshold(&scores, config.x_percent) else {
        return BTreeSet::new();
    };
    let mut selected: BTreeSet<FeatureId> = table
        .scores
        .iter()
        .filter(|(_, s)| **s >= threshold)
        .map(|(f, _)| f.clone())
        .collect();
    selected.extend(table.ranking().into_iter().take(config.top_fill));
    selected
}

pub struct OperatorContext<'a> {
    pub catalog: &'a FeatureCatalog,
    pub config: &'a OperatorConfig,
    pub score_tables: Option<&'a ScoreTables>,
    pub task_id: &'a str,
}

/// Applies one paraphrase operator to an EHR.
pub fn apply_operator(ehr: &PatientEhr, op: OperatorId, ctx: &OperatorContext<'_>) -> Result<Rewrite> {
    let x = ctx.config.x_percent;
    let tuples: Vec<_> = ehr.tuples().collect();
    let kept: Vec<usize> = match op {
        OperatorId::Identity => (0..tuples.len()).collect(),
        OperatorId::Temporal => {
            let t_max = ehr.max_timestamp() as f64;
            let start = ((1.0 - x) * t_max - 1e-9).ceil().max(0.0) as u64;
            (0..tuples.len()).filter(|&i| tuples[i].timestamp >= start).collect()
        }
        OperatorId::Abnormal => {
            let mut kept = Vec::new();
            for (i, t) in tuples.iter().enumerate() {
                if ctx.catalog.require(&t.feature)?.is_abnormal(&t.value) {
                    kept.push(i);
                }
            }
            kept
        }
        OperatorId::Mi | OperatorId::Mrmr | OperatorId::Rfe => {
            let table = ctx
                .score_tables
                .and_then(|t| t.get(op))
                .ok_or_else(|| Error::MissingScoreTable(op.to_string()))?;
            let chosen = top_percent_select(table, ctx.config);
            (0..tuples.len()).filter(|&i| chosen.contains(&tuples[i].feature)).collect()
        }
        OperatorId::RandFeature => {
            let present: BTreeSet<&str> = tuples
                .iter()
                .filter(|t| !matches!(t.value, Value::Missing))
                .map(|t| t.feature.as_str())
                .collect();
            let present: Vec<&str> = present.into_iter().collect();
            let amount = ceil_fraction(x, present.len());
            let mut rng = seed::rng(seed::derive(ctx.config.rng_seed, &[&ehr.patient_id, op.name()]));
            let picked: BTreeSet<&str> = sample(&mut rng, present.len(), amount)
                .into_iter()
                .map(|i| present[i])
                .collect();
            (0..tuples.len())
                .filter(|&i| picked.contains(tuples[i].feature.as_str()))
                .collect()
        }
        OperatorId::RandTuple => {
            let amount = ceil_fraction(x, tuples.len());
            let mut rng = seed::rng(seed::derive(ctx.config.rng_seed, &[&ehr.patient_id, op.name()]));
            sample(&mut rng, tuples.len(), amount).into_vec()
        }
    };
    Ok(Rewrite::new(kept, RewriteSource::Operator(op)))
}

fn ceil_fraction(x: f64, n: usize) -> usize {
    ((x * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}
