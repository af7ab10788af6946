//! Seeded synthetic cohorts with planted predictive features and three task
//! labelers: a planted-logit mortality label, a readmission label driven by a
//! latent inter-visit gap, and a length-of-stay label driven by a latent stay
//! length whose inputs are truncated to the first 48 hours.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CohortRecord, Latent};
use crate::ehr::{FeatureCatalog, FeatureId, FeatureInfo, FeatureValueTuple, Modality, PatientEhr, Value};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::select::encoding::{aggregate_patient, Aggregate};
use crate::seed;

pub const MOR: &str = "mor";
pub const RA: &str = "ra";
pub const LOS: &str = "los";
pub const TASKS: [&str; 3] = [MOR, RA, LOS];

pub const RA_WINDOW_DAYS: f64 = 15.0;
pub const LOS_THRESHOLD_DAYS: f64 = 7.0;
/// LOS inputs keep only tuples recorded in the first 48 hours.
pub const LOS_INPUT_HOURS: u64 = 48;

/// Spread of a numeric feature's values around its center, in value units.
const VALUE_SCALE: f64 = 0.5;
const CATEGORY_LEVELS: usize = 4;
const RATE_TOLERANCE: f64 = 0.2;

/// Positive rates used for tasks other than the primary one, roughly those of
/// a large ICU cohort.
pub fn default_positive_rate(task: &str) -> f64 {
    match task {
        RA => 0.52,
        LOS => 0.39,
        _ => 0.02,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub n_features: usize,
    pub n_relevant: usize,
    pub positive_rate_target: f64,
    /// Inclusive range.
    pub visits_per_patient: (usize, usize),
    /// Inclusive range.
    pub tuples_per_visit: (usize, usize),
    pub noise_sigma: f64,
    /// Share of features that are categorical codes rather than numeric labs.
    pub categorical_fraction: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_patients: 2000,
            n_features: 50,
            n_relevant: 5,
            positive_rate_target: 0.02,
            visits_per_patient: (1, 4),
            tuples_per_visit: (8, 20),
            noise_sigma: 0.5,
            categorical_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn n_categorical(&self) -> usize {
        (self.n_features as f64 * self.categorical_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be positive"));
        }
        if self.n_features == 0 {
            return Err(Error::config("n_features", "must be positive"));
        }
        if self.n_relevant > self.n_features {
            return Err(Error::config("n_relevant", "must not exceed n_features"));
        }
        if !(self.positive_rate_target > 0.0 && self.positive_rate_target < 1.0) {
            return Err(Error::config("positive_rate_target", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.categorical_fraction) {
            return Err(Error::config("categorical_fraction", "must lie in [0, 1]"));
        }
        let (v0, v1) = self.visits_per_patient;
        if v0 == 0 || v0 > v1 {
            return Err(Error::config("visits_per_patient", "need 1 <= min <= max"));
        }
        let (t0, t1) = self.tuples_per_visit;
        if t0 == 0 || t0 > t1 {
            return Err(Error::config("tuples_per_visit", "need 1 <= min <= max"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if self.n_relevant > self.n_features - self.n_categorical() {
            return Err(Error::InfeasibleSpec(format!(
                "{} relevant features but only {} numeric ones",
                self.n_relevant,
                self.n_features - self.n_categorical()
            )));
        }
        Ok(())
    }
}

/// How a task's label is derived from a synthetic patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    /// `label = draw < sigmoid(bias + sum_f w_f z_f + noise)` with `z_f` the
    /// standardized last value of `f` (0 when absent).
    Planted {
        bias: f64,
        weights: BTreeMap<FeatureId, f64>,
        centers: BTreeMap<FeatureId, f64>,
        scale: f64,
    },
    /// 1 iff the gap to the next admission is at most `window_days`.
    Readmission { window_days: f64 },
    /// 1 iff the first stay lasts strictly longer than `threshold_days`.
    LengthOfStay { threshold_days: f64, input_hours: u64 },
}

impl TaskParams {
    pub fn for_task(task: &str) -> Option<TaskParams> {
        match task {
            RA => Some(TaskParams::Readmission {
                window_days: RA_WINDOW_DAYS,
            }),
            LOS => Some(TaskParams::LengthOfStay {
                threshold_days: LOS_THRESHOLD_DAYS,
                input_hours: LOS_INPUT_HOURS,
            }),
            _ => None,
        }
    }
}

fn missing(ehr: &PatientEhr, attribute: &str) -> Error {
    Error::MissingAttribute {
        patient: ehr.patient_id.clone(),
        attribute: attribute.to_string(),
    }
}

/// The planted linear score `sum_f w_f z_f` over last observed values.
pub fn planted_score(ehr: &PatientEhr, weights: &BTreeMap<FeatureId, f64>, centers: &BTreeMap<FeatureId, f64>, scale: f64) -> f64 {
    let agg = aggregate_patient(ehr);
    weights
        .iter()
        .map(|(f, w)| match (agg.get(f), centers.get(f)) {
            (Some(Aggregate::Numeric(v)), Some(c)) => w * (v - c) / scale,
            _ => 0.0,
        })
        .sum()
}

pub fn label_task(ehr: &PatientEhr, latent: Option<&Latent>, params: &TaskParams) -> Result<u8> {
    match params {
        TaskParams::Planted {
            bias,
            weights,
            centers,
            scale,
        } => {
            let noise = latent.and_then(|l| l.mor_noise).ok_or_else(|| missing(ehr, "mor_noise"))?;
            let draw = latent.and_then(|l| l.mor_draw).ok_or_else(|| missing(ehr, "mor_draw"))?;
            let logit = bias + planted_score(ehr, weights, centers, *scale) + noise;
            Ok((draw < sigmoid(logit)) as u8)
        }
        TaskParams::Readmission { window_days } => {
            let gap = latent.and_then(|l| l.gap_days).ok_or_else(|| missing(ehr, "gap_days"))?;
            Ok((gap <= *window_days) as u8)
        }
        TaskParams::LengthOfStay { threshold_days, .. } => {
            let stay = latent.and_then(|l| l.stay_days).ok_or_else(|| missing(ehr, "stay_days"))?;
            Ok((stay > *threshold_days) as u8)
        }
    }
}

/// The model input for `task`: the LOS view drops tuples after hour 48.
pub fn task_input(ehr: &PatientEhr, task: &str) -> PatientEhr {
    if task == LOS {
        los_view(ehr, LOS_INPUT_HOURS)
    } else {
        ehr.clone()
    }
}

pub fn los_view(ehr: &PatientEhr, hours: u64) -> PatientEhr {
    let mut out = ehr.filter(|t| t.timestamp <= hours);
    out.demographics = ehr.demographics.clone();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub task_id: String,
    pub relevant_features: BTreeSet<FeatureId>,
    pub weights: BTreeMap<FeatureId, f64>,
    /// Per-patient logit of the primary task's label (before the Bernoulli
    /// draw for planted tasks; signed distance to the threshold otherwise).
    pub true_logit: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohort {
    #[serde(skip)]
    pub cohort: Cohort,
    #[serde(skip)]
    pub catalog: FeatureCatalog,
    pub oracle: OracleInfo,
    pub task_params: BTreeMap<String, TaskParams>,
}

struct FeatureDef {
    id: FeatureId,
    numeric: bool,
    center: f64,
    weight: f64,
}

/// Smallest `b` in `[lo, hi]` with `count(b) >= target`, for a
/// non-decreasing step function `count`.
fn bisect(count: impl Fn(f64) -> usize, target: usize, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_rate(task: &str, positives: usize, n: usize, target: f64) -> Result<()> {
    let rate = positives as f64 / n as f64;
    if (rate - target).abs() > RATE_TOLERANCE * target {
        return Err(Error::InfeasibleSpec(format!(
            "task {task}: positive rate {rate:.4} is outside ±{:.0}% of {target}",
            RATE_TOLERANCE * 100.0
        )));
    }
    Ok(())
}

fn random_weights(rng: &mut seed::Rng, relevant: &[FeatureId]) -> BTreeMap<FeatureId, f64> {
    relevant
        .iter()
        .map(|f| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (f.clone(), sign * rng.random_range(1.0..2.0))
        })
        .collect()
}

/// Offset `o` so that exactly `k` scores are `> o`, halfway between ranks.
fn rank_offset(scores: &[f64], k: usize) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    match k {
        0 => s[0] + 1.0,
        k if k >= s.len() => s[s.len() - 1] - 1.0,
        k => 0.5 * (s[k - 1] + s[k]),
    }
}

/// Generates a cohort whose `task_id` label hits `positive_rate_target`
/// (within ±20% relative). The other built-in tasks are labelled too, at
/// their default rates. Unknown task ids get a planted-logit label.
pub fn generate_cohort(spec: &CohortSpec, task_id: &str) -> Result<SyntheticCohort> {
    spec.validate()?;
    let n = spec.n_patients;
    let mut rng = seed::rng(seed::derive(spec.seed, &["synth", "structure"]));

    // Feature definitions and catalog.
    let n_cat = spec.n_categorical();
    let cat_slots: BTreeSet<usize> = sample(&mut rng, spec.n_features, n_cat).into_iter().collect();
    let mut defs = Vec::with_capacity(spec.n_features);
    let mut entries = BTreeMap::new();
    let cat_modalities = [Modality::Diagnosis, Modality::Medication, Modality::Procedure];
    for i in 0..spec.n_features {
        let weight = rng.random_range(0.5..1.5);
        if cat_slots.contains(&i) {
            let modality = cat_modalities[i % 3];
            let prefix = match modality {
                Modality::Diagnosis => "dx",
                Modality::Medication => "med",
                _ => "proc",
            };
            let id = format!("{prefix}_{i:02}");
            entries.insert(id.clone(), FeatureInfo::categorical(&id, modality));
            defs.push(FeatureDef {
                id,
                numeric: false,
                center: 0.0,
                weight,
            });
        } else {
            let id = format!("lab_{i:02}");
            let center = rng.random_range(5..=40) as f64;
            let range = rng.random::<bool>().then_some((center - 2.0, center + 2.0));
            entries.insert(id.clone(), FeatureInfo::numeric(&id, Modality::Lab, range));
            defs.push(FeatureDef {
                id,
                numeric: true,
                center,
                weight,
            });
        }
    }
    entries.insert("age".into(), FeatureInfo::numeric("age", Modality::Demographic, None));
    entries.insert("sex".into(), FeatureInfo::categorical("sex", Modality::Demographic));
    let catalog = FeatureCatalog::new(entries)?;

    let numeric_idx: Vec<usize> = (0..spec.n_features).filter(|i| defs[*i].numeric).collect();
    let relevant: Vec<FeatureId> = {
        let mut picks: Vec<usize> = sample(&mut rng, numeric_idx.len(), spec.n_relevant)
            .into_iter()
            .map(|j| numeric_idx[j])
            .collect();
        picks.sort();
        picks.into_iter().map(|i| defs[i].id.clone()).collect()
    };
    let centers: BTreeMap<FeatureId, f64> = defs.iter().filter(|d| d.numeric).map(|d| (d.id.clone(), d.center)).collect();
    let primary_planted = TaskParams::for_task(task_id).is_none();
    let mut task_weights: BTreeMap<String, BTreeMap<FeatureId, f64>> = BTreeMap::new();
    let mut task_names: Vec<String> = TASKS.iter().map(|t| t.to_string()).collect();
    if !task_names.iter().any(|t| t == task_id) {
        task_names.push(task_id.to_string());
    }
    for t in &task_names {
        let mut trng = seed::rng(seed::derive(spec.seed, &["synth", "weights", t]));
        task_weights.insert(t.clone(), random_weights(&mut trng, &relevant));
    }
    let total_weight: f64 = defs.iter().map(|d| d.weight).sum();

    // Per-patient latent state.
    struct PatientLatent {
        x: Vec<f64>,
        level: Vec<usize>,
        noise: BTreeMap<String, f64>,
        draw: f64,
    }
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let mut prng = seed::rng(seed::derive_index(spec.seed, "synth-patient", i as u64));
        let x: Vec<f64> = (0..spec.n_features).map(|_| prng.sample(StandardNormal)).collect();
        let level: Vec<usize> = (0..spec.n_features).map(|_| prng.random_range(0..CATEGORY_LEVELS)).collect();
        let noise = task_names
            .iter()
            .map(|t| (t.clone(), spec.noise_sigma * prng.sample::<f64, _>(StandardNormal)))
            .collect();
        latents.push(PatientLatent {
            x,
            level,
            noise,
            draw: prng.random::<f64>(),
        });
    }

    // Structural scores: normalized latent linear score plus noise.
    let structural = |task: &str| -> Vec<f64> {
        let w = &task_weights[task];
        let norm = w.values().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        latents
            .iter()
            .map(|l| {
                let s: f64 = defs
                    .iter()
                    .zip(&l.x)
                    .filter_map(|(d, x)| w.get(&d.id).map(|wf| wf * x))
                    .sum();
                s / norm + l.noise[task]
            })
            .collect()
    };
    let rate_for = |task: &str| {
        if task == task_id {
            spec.positive_rate_target
        } else {
            default_positive_rate(task)
        }
    };
    let target_count = |task: &str| ((rate_for(task) * n as f64).round() as usize).max(1);
    let ra_scores = structural(RA);
    let los_scores = structural(LOS);
    let ra_offset = rank_offset(&ra_scores, target_count(RA));
    let los_offset = rank_offset(&los_scores, target_count(LOS));

    // Records.
    let mut records = Vec::with_capacity(n);
    for (i, l) in latents.iter().enumerate() {
        let mut prng = seed::rng(seed::derive_index(spec.seed, "synth-record", i as u64));
        let gap_days = RA_WINDOW_DAYS * (ra_offset - ra_scores[i]).exp();
        let stay_days = LOS_THRESHOLD_DAYS * (los_scores[i] - los_offset).exp();
        let mut ehr = PatientEhr::new(&format!("p{i:05}"));
        ehr.demographics.push(FeatureValueTuple::numeric("age", prng.random_range(18..=90) as f64, 0));
        ehr.demographics.push(FeatureValueTuple::categorical(
            "sex",
            if prng.random::<bool>() { "F" } else { "M" },
            0,
        ));
        let n_visits = prng.random_range(spec.visits_per_patient.0..=spec.visits_per_patient.1);
        let mut start = 0u64;
        for v in 0..n_visits {
            let stay_hours = if v == 0 {
                (stay_days * 24.0).round().max(1.0) as u64
            } else {
                prng.random_range(24..=240)
            };
            // Measurements concentrate in the first four days of a stay.
            let span = stay_hours.min(96);
            let n_tuples = prng.random_range(spec.tuples_per_visit.0..=spec.tuples_per_visit.1);
            let mut stamps: Vec<u64> = (0..n_tuples).map(|_| start + prng.random_range(0..=span)).collect();
            stamps.sort();
            let visit = stamps
                .into_iter()
                .map(|t| {
                    let mut u = prng.random::<f64>() * total_weight;
                    let mut k = 0;
                    while k + 1 < defs.len() && u >= defs[k].weight {
                        u -= defs[k].weight;
                        k += 1;
                    }
                    let d = &defs[k];
                    let value = if d.numeric {
                        let jitter: f64 = prng.sample(StandardNormal);
                        Value::Numeric((d.center + VALUE_SCALE * (l.x[k] + 0.3 * jitter)).round())
                    } else {
                        let lvl = if prng.random::<f64>() < 0.8 {
                            l.level[k]
                        } else {
                            prng.random_range(0..CATEGORY_LEVELS)
                        };
                        Value::Categorical(format!("{}_{}", d.id, (b'a' + lvl as u8) as char))
                    };
                    FeatureValueTuple::new(&d.id, value, t)
                })
                .collect();
            ehr.visits.push(visit);
            start += stay_hours + 24 * prng.random_range(5..=120);
        }
        records.push(CohortRecord {
            ehr,
            labels: BTreeMap::new(),
            latent: Some(Latent {
                mor_noise: Some(l.noise[if primary_planted { task_id } else { MOR }]),
                mor_draw: Some(l.draw),
                gap_days: Some(gap_days),
                stay_days: Some(stay_days),
            }),
        });
    }

    // Planted task: solve the bias on the realized last values.
    let planted_task = if primary_planted { task_id } else { MOR };
    let pw = task_weights[planted_task].clone();
    let base: Vec<f64> = records
        .iter()
        .map(|r| planted_score(&r.ehr, &pw, &centers, VALUE_SCALE) + r.latent.as_ref().unwrap().mor_noise.unwrap())
        .collect();
    let draws: Vec<f64> = latents.iter().map(|l| l.draw).collect();
    let count = |b: f64| base.iter().zip(&draws).filter(|(s, u)| **u < sigmoid(b + **s)).count();
    let bias = bisect(count, target_count(planted_task), -60.0, 60.0);

    let mut task_params = BTreeMap::new();
    task_params.insert(
        planted_task.to_string(),
        TaskParams::Planted {
            bias,
            weights: pw.clone(),
            centers: centers.clone(),
            scale: VALUE_SCALE,
        },
    );
    task_params.insert(RA.to_string(), TaskParams::for_task(RA).unwrap());
    task_params.insert(LOS.to_string(), TaskParams::for_task(LOS).unwrap());

    for r in &mut records {
        for (t, p) in &task_params {
            let y = label_task(&r.ehr, r.latent.as_ref(), p)?;
            r.labels.insert(t.clone(), y);
        }
    }
    for t in task_params.keys() {
        let positives = records.iter().filter(|r| r.labels[t] == 1).count();
        if t == task_id {
            check_rate(t, positives, n, spec.positive_rate_target)?;
        }
    }

    let true_logit = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let z = match task_id {
                RA => ra_scores[i] - ra_offset,
                LOS => los_scores[i] - los_offset,
                _ => bias + base[i],
            };
            (r.ehr.patient_id.clone(), z)
        })
        .collect();
    Ok(SyntheticCohort {
        cohort: Cohort { records },
        catalog,
        oracle: OracleInfo {
            task_id: task_id.to_string(),
            relevant_features: relevant.iter().cloned().collect(),
            weights: task_weights[task_id].clone(),
            true_logit,
        },
        task_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::validate_ehr;

    fn small(seed: u64) -> CohortSpec {
        CohortSpec {
            n_patients: 300,
            positive_rate_target: 0.2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn hits_target_rate_and_validates() {
        let s = generate_cohort(&small(1), MOR).unwrap();
        let y = s.cohort.labels(MOR).unwrap();
        let rate = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        assert!((rate - 0.2).abs() <= 0.04, "{rate}");
        for r in &s.cohort.records {
            assert!(validate_ehr(&r.ehr, &s.catalog).is_valid());
        }
        assert_eq!(s.oracle.relevant_features.len(), 5);
        assert!(s.oracle.relevant_features.iter().all(|f| s.catalog.get(f).is_some()));
    }

    #[test]
    fn structural_labels_follow_thresholds() {
        let p = TaskParams::for_task(RA).unwrap();
        let e = PatientEhr::new("x");
        let lat = |g: f64| Latent {
            gap_days: Some(g),
            ..Default::default()
        };
        assert_eq!(label_task(&e, Some(&lat(10.0)), &p).unwrap(), 1);
        assert_eq!(label_task(&e, Some(&lat(20.0)), &p).unwrap(), 0);
        assert_eq!(label_task(&e, Some(&lat(15.0)), &p).unwrap(), 1);
        let p = TaskParams::for_task(LOS).unwrap();
        let stay = Latent {
            stay_days: Some(7.0),
            ..Default::default()
        };
        assert_eq!(label_task(&e, Some(&stay), &p).unwrap(), 0);
        assert!(matches!(label_task(&e, None, &p), Err(Error::MissingAttribute { .. })));
    }

    #[test]
    fn los_view_truncates() {
        let s = generate_cohort(&small(2), LOS).unwrap();
        for r in &s.cohort.records {
            let v = task_input(&r.ehr, LOS);
            assert!(v.tuples().all(|t| t.timestamp <= 48));
            assert_eq!(
                v.num_tuples(),
                r.ehr.tuples().filter(|t| t.timestamp <= 48).count()
            );
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_cohort(&small(3), RA).unwrap();
        let b = generate_cohort(&small(3), RA).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cohort, b.cohort);
    }

    #[test]
    fn infeasible_rate() {
        let spec = CohortSpec {
            n_patients: 10,
            positive_rate_target: 0.01,
            ..Default::default()
        };
        assert!(matches!(generate_cohort(&spec, MOR), Err(Error::InfeasibleSpec(_))));
    }
}
