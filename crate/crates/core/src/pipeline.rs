//! Dataset construction: splits, operator candidate rewrites, the scorer
//! subset, pseudo-label selection, the augmented predictor set and the dual
//! set used for alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::alignment::{true_label_proba, AlignGroup};
use crate::cohort::Cohort;
use crate::ehr::{verbalize, FeatureCatalog, PatientEhr, Rewrite, RewriteSource};
use crate::error::{Error, Result};
use crate::math::top_fraction_threshold;
use crate::predictor::PredictorModel;
use crate::rewriter::{sample_rewrites, MaskExample, RewriterPolicy};
use crate::select::{apply_operator, OperatorConfig, OperatorContext, OperatorId, ScoreTables};
use crate::seed;
use crate::synth::task_input;

/// One patient's model input for a task, with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ehr: PatientEhr,
    pub label: u8,
}

/// A task's examples ordered by patient id.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub examples: Vec<Example>,
}

impl TaskDataset {
    /// Task inputs (e.g. the 48-hour view for LOS) for the patients in `ids`,
    /// or for everyone when `ids` is `None`.
    pub fn from_cohort(cohort: &Cohort, task_id: &str, ids: Option<&[String]>) -> Result<Self> {
        let wanted: Option<BTreeSet<&str>> = ids.map(|v| v.iter().map(String::as_str).collect());
        let labels = cohort.labels(task_id)?;
        let mut examples: Vec<Example> = cohort
            .records
            .iter()
            .zip(labels)
            .filter(|(r, _)| wanted.as_ref().is_none_or(|w| w.contains(r.ehr.patient_id.as_str())))
            .map(|(r, label)| Example {
                ehr: task_input(&r.ehr, task_id),
                label,
            })
            .collect();
        examples.sort_by(|a, b| a.ehr.patient_id.cmp(&b.ehr.patient_id));
        Ok(TaskDataset {
            task_id: task_id.to_string(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.ehr.patient_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn labelled(&self) -> Vec<(&PatientEhr, u8)> {
        self.examples.iter().map(|e| (&e.ehr, e.label)).collect()
    }

    pub fn get(&self, patient_id: &str) -> Option<&Example> {
        self.examples
            .binary_search_by(|e| e.ehr.patient_id.as_str().cmp(patient_id))
            .ok()
            .map(|i| &self.examples[i])
    }

    /// `(verbalized original, label)` pairs.
    pub fn texts(&self, catalog: &FeatureCatalog) -> Result<Vec<(String, u8)>> {
        self.examples
            .par_iter()
            .map(|e| Ok((verbalize(&e.ehr, catalog)?.text, e.label)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Label-stratified seeded split; `fractions` are the train and validation
/// shares, the remainder is test.
pub fn split_patients(cohort: &Cohort, task_id: &str, fractions: (f64, f64), seed_value: u64) -> Result<Split> {
    let (f_train, f_val) = fractions;
    if !(f_train > 0.0 && f_val >= 0.0 && f_train + f_val <= 1.0) {
        return Err(Error::config("split", "need train > 0, val >= 0, train + val <= 1"));
    }
    let labels = cohort.labels(task_id)?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut ids: Vec<String> = cohort
            .records
            .iter()
            .zip(&labels)
            .filter(|(_, y)| **y == class)
            .map(|(r, _)| r.ehr.patient_id.clone())
            .collect();
        ids.sort();
        let mut rng = seed::rng(seed::derive(seed_value, &["split", task_id, &class.to_string()]));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (f_train * n as f64).round() as usize;
        let n_val = ((f_val * n as f64).round() as usize).min(n - n_train);
        split.test.extend(ids.split_off(n_train + n_val));
        split.val.extend(ids.split_off(n_train));
        split.train.extend(ids);
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

/// Fails if any validation or test patient appears in a fitting set.
pub fn audit_leakage(split: &Split, fitting_sets: &[(&str, &[String])]) -> Result<()> {
    let held_out: BTreeSet<&str> = split.val.iter().chain(&split.test).map(String::as_str).collect();
    for (name, ids) in fitting_sets {
        if let Some(p) = ids.iter().find(|p| held_out.contains(p.as_str())) {
            return Err(Error::Leakage {
                set: name.to_string(),
                patient: p.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub patient_id: String,
    pub rewrite: Rewrite,
}

impl CandidateEntry {
    pub fn operator(&self) -> Option<OperatorId> {
        match self.rewrite.source {
            RewriteSource::Operator(op) => Some(op),
            _ => None,
        }
    }
}

/// One rewrite per operator per patient, ordered by patient id then operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRewriteSet {
    pub task_id: String,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateRewriteSet {
    pub fn by_patient(&self) -> BTreeMap<&str, Vec<&CandidateEntry>> {
        let mut m: BTreeMap<&str, Vec<&CandidateEntry>> = BTreeMap::new();
        for e in &self.entries {
            m.entry(e.patient_id.as_str()).or_default().push(e);
        }
        m
    }
}

/// Applies all eight operators to every patient. `tables` must have been fit
/// on the task's training split.
pub fn build_candidate_rewrites(
    data: &TaskDataset,
    catalog: &FeatureCatalog,
    config: &OperatorConfig,
    tables: &ScoreTables,
) -> Result<CandidateRewriteSet> {
    config.validate()?;
    let ctx = OperatorContext {
        catalog,
        config,
        score_tables: Some(tables),
        task_id: &data.task_id,
    };
    let per_patient: Vec<Vec<CandidateEntry>> = data
        .examples
        .par_iter()
        .map(|ex| {
            OperatorId::ALL
                .iter()
                .map(|&op| {
                    Ok(CandidateEntry {
                        patient_id: ex.ehr.patient_id.clone(),
                        rewrite: apply_operator(&ex.ehr, op, &ctx)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(CandidateRewriteSet {
        task_id: data.task_id.clone(),
        entries: per_patient.into_iter().flatten().collect(),
    })
}

fn rewrite_text(ex: &Example, rewrite: &Rewrite, catalog: &FeatureCatalog) -> Result<String> {
    Ok(verbalize(&rewrite.materialize(&ex.ehr)?, catalog)?.text)
}

fn lookup<'a>(data: &'a TaskDataset, patient_id: &str) -> Result<&'a Example> {
    data.get(patient_id)
        .ok_or_else(|| Error::config("patient_id", format!("`{patient_id}` is not in the {} dataset", data.task_id)))
}

/// Patients sampled for the scorer: `round(fraction * n)` of `data`, seeded.
pub fn sample_scorer_patients(data: &TaskDataset, fraction: f64, seed_value: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("scorer_fraction", "must lie in (0, 1]"));
    }
    let k = (fraction * data.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::EmptySample {
            fraction,
            population: data.len(),
        });
    }
    let mut ids = data.ids();
    let mut rng = seed::rng(seed::derive(seed_value, &["scorer-subset", &data.task_id]));
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort();
    Ok(ids)
}

/// Verbalized rewrites of the sampled patients with inherited labels.
pub fn build_scorer_subset(
    data: &TaskDataset,
    rw: &CandidateRewriteSet,
    catalog: &FeatureCatalog,
    fraction: f64,
    seed_value: u64,
) -> Result<Vec<(String, u8)>> {
    let chosen: BTreeSet<String> = sample_scorer_patients(data, fraction, seed_value)?.into_iter().collect();
    rw.entries
        .par_iter()
        .filter(|e| chosen.contains(&e.patient_id))
        .map(|e| {
            let ex = lookup(data, &e.patient_id)?;
            Ok((rewrite_text(ex, &e.rewrite, catalog)?, ex.label))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub patient_id: String,
    pub source_task: String,
    pub rewrite: Rewrite,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMeta {
    pub k_percent: f64,
    pub tau: BTreeMap<String, f64>,
    /// Candidates scored per task.
    pub scored: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelDataset {
    pub entries: Vec<PseudoLabel>,
    pub selection_meta: SelectionMeta,
}

impl PseudoLabelDataset {
    /// Likelihood-training pairs; each entry is resolved against the dataset
    /// of its source task.
    pub fn mask_examples(&self, datasets: &[&TaskDataset], catalog: &FeatureCatalog) -> Result<Vec<MaskExample>> {
        let by_task: BTreeMap<&str, &TaskDataset> = datasets.iter().map(|d| (d.task_id.as_str(), *d)).collect();
        self.entries
            .par_iter()
            .map(|e| {
                let data = by_task
                    .get(e.source_task.as_str())
                    .ok_or_else(|| Error::config("source_task", format!("no dataset for task `{}`", e.source_task)))?;
                MaskExample::new(&lookup(data, &e.patient_id)?.ehr, &e.rewrite, catalog)
            })
            .collect()
    }
}

/// Each candidate's score: the scorer's probability of the patient's true label.
pub fn score_candidates(
    data: &TaskDataset,
    rw: &CandidateRewriteSet,
    scorer: &PredictorModel,
    catalog: &FeatureCatalog,
) -> Result<Vec<f64>> {
    rw.entries
        .par_iter()
        .map(|e| {
            let ex = lookup(data, &e.patient_id)?;
            let p = scorer.predict_proba(&rewrite_text(ex, &e.rewrite, catalog)?);
            Ok(true_label_proba(p, ex.label))
        })
        .collect()
}

/// Keeps the candidates scoring at least the task threshold
/// (value at descending rank `ceil(k% * n)`, ties included).
pub fn select_by_scores(rw: &CandidateRewriteSet, scores: &[f64], k_percent: f64) -> (Vec<PseudoLabel>, Option<f64>) {
    let Some(tau) = top_fraction_threshold(scores, k_percent / 100.0) else {
        return (Vec::new(), None);
    };
    let kept = rw
        .entries
        .iter()
        .zip(scores)
        .filter(|(_, s)| **s >= tau)
        .map(|(e, s)| PseudoLabel {
            patient_id: e.patient_id.clone(),
            source_task: rw.task_id.clone(),
            rewrite: e.rewrite.clone(),
            score: *s,
        })
        .collect();
    (kept, Some(tau))
}

/// Scores every task's candidates with that task's scorer and unions the
/// above-threshold rewrites. A (patient, rewrite) pair appears at most once
/// per source task.
pub fn select_pseudolabels(
    tasks: &[(&TaskDataset, &CandidateRewriteSet, &PredictorModel)],
    catalog: &FeatureCatalog,
    k_percent: f64,
) -> Result<PseudoLabelDataset> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::config("k_percent", "must lie in (0, 100]"));
    }
    let mut out = PseudoLabelDataset {
        entries: Vec::new(),
        selection_meta: SelectionMeta {
            k_percent,
            ..Default::default()
        },
    };
    for (data, rw, scorer) in tasks {
        let scores = score_candidates(data, rw, scorer, catalog)?;
        let (kept, tau) = select_by_scores(rw, &scores, k_percent);
        let mut seen = BTreeSet::new();
        for e in kept {
            if seen.insert((e.patient_id.clone(), e.rewrite.kept.clone())) {
                out.entries.push(e);
            }
        }
        if let Some(t) = tau {
            out.selection_meta.tau.insert(rw.task_id.clone(), t);
        }
        out.selection_meta.scored.insert(rw.task_id.clone(), scores.len());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    OperatorRewrite,
    PolicyRewrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedExample {
    pub patient_id: String,
    pub text: String,
    pub label: u8,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub examples: Vec<AugmentedExample>,
}

impl AugmentedDataset {
    pub fn pairs(&self) -> Vec<(String, u8)> {
        self.examples.iter().map(|e| (e.text.clone(), e.label)).collect()
    }
}

/// Originals, their operator rewrites, and `policy_rewrites_per_patient`
/// policy samples per patient, all labelled with the patient's label.
pub fn build_augmented(
    data: &TaskDataset,
    rw: Option<&CandidateRewriteSet>,
    policy: Option<&RewriterPolicy>,
    policy_rewrites_per_patient: usize,
    catalog: &FeatureCatalog,
    seed_value: u64,
) -> Result<AugmentedDataset> {
    if policy_rewrites_per_patient > 0 && policy.is_none() {
        return Err(Error::config("policy_rewrites_per_patient", "needs a rewriter policy"));
    }
    let operator: BTreeMap<&str, Vec<&CandidateEntry>> = rw.map(|r| r.by_patient()).unwrap_or_default();
    let sample_seed = seed::derive(seed_value, &["augmented", &data.task_id]);
    let groups: Vec<Vec<AugmentedExample>> = data
        .examples
        .par_iter()
        .map(|ex| {
            let id = &ex.ehr.patient_id;
            let make = |text: String, origin| AugmentedExample {
                patient_id: id.clone(),
                text,
                label: ex.label,
                origin,
            };
            let mut out = vec![make(verbalize(&ex.ehr, catalog)?.text, Origin::Original)];
            for e in operator.get(id.as_str()).into_iter().flatten() {
                out.push(make(rewrite_text(ex, &e.rewrite, catalog)?, Origin::OperatorRewrite));
            }
            if let Some(p) = policy {
                for r in sample_rewrites(p, &ex.ehr, catalog, policy_rewrites_per_patient, sample_seed)? {
                    out.push(make(rewrite_text(ex, &r, catalog)?, Origin::PolicyRewrite));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(AugmentedDataset {
        examples: groups.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualGroup {
    pub patient_id: String,
    pub label: u8,
    pub original_text: String,
    pub candidate_texts: Vec<String>,
    /// Policy samples; each carries its exact log-probability.
    pub candidates: Vec<Rewrite>,
}

impl DualGroup {
    pub fn logprobs(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.logprob.unwrap_or(0.0)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualDataset {
    pub groups: Vec<DualGroup>,
}

/// `n_i` policy samples per patient with their log-probabilities.
pub fn build_dual(
    data: &TaskDataset,
    policy: &RewriterPolicy,
    n_i: usize,
    catalog: &FeatureCatalog,
    seed_value: u64,
) -> Result<DualDataset> {
    if n_i == 0 {
        return Err(Error::config("n_i", "must be at least 1"));
    }
    let sample_seed = seed::derive(seed_value, &["dual", &data.task_id]);
    let groups = data
        .examples
        .par_iter()
        .map(|ex| {
            let candidates = sample_rewrites(policy, &ex.ehr, catalog, n_i, sample_seed)?;
            let candidate_texts = candidates
                .iter()
                .map(|c| rewrite_text(ex, c, catalog))
                .collect::<Result<_>>()?;
            Ok(DualGroup {
                patient_id: ex.ehr.patient_id.clone(),
                label: ex.label,
                original_text: verbalize(&ex.ehr, catalog)?.text,
                candidate_texts,
                candidates,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DualDataset { groups })
}

/// Freezes the predictor's view of each group into an alignment target.
pub fn align_groups(
    dual: &DualDataset,
    data: &TaskDataset,
    predictor: &PredictorModel,
    catalog: &FeatureCatalog,
    tau: f64,
) -> Result<Vec<AlignGroup>> {
    dual.groups
        .par_iter()
        .map(|g| {
            let ex = lookup(data, &g.patient_id)?;
            let scores: Vec<f64> = g
                .candidate_texts
                .iter()
                .map(|t| true_label_proba(predictor.predict_proba(t), g.label))
                .collect();
            AlignGroup::new(&ex.ehr, &g.candidates, &scores, catalog, tau)
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortSpec, MOR};

    fn setup(n: usize) -> (TaskDataset, FeatureCatalog, ScoreTables) {
        let s = generate_cohort(
            &CohortSpec {
                n_patients: n,
                positive_rate_target: 0.3,
                seed: 5,
                ..Default::default()
            },
            MOR,
        )
        .unwrap();
        let data = TaskDataset::from_cohort(&s.cohort, MOR, None).unwrap();
        let tables = ScoreTables::fit(MOR, &data.labelled(), &s.catalog, &OperatorConfig::default()).unwrap();
        (data, s.catalog, tables)
    }

    #[test]
    fn candidates_are_eight_per_patient_and_subsets() {
        let (data, catalog, tables) = setup(10);
        let rw = build_candidate_rewrites(&data, &catalog, &OperatorConfig::default(), &tables).unwrap();
        assert_eq!(rw.entries.len(), 80);
        for (pid, entries) in rw.by_patient() {
            let ops: BTreeSet<OperatorId> = entries.iter().filter_map(|e| e.operator()).collect();
            assert_eq!(ops.len(), 8);
            let ehr = &data.get(pid).unwrap().ehr;
            for e in entries {
                assert!(crate::ehr::is_subset(ehr, &e.rewrite.materialize(ehr).unwrap()));
            }
        }
    }

    #[test]
    fn scorer_subset_sizes() {
        let (data, catalog, tables) = setup(100);
        let rw = build_candidate_rewrites(&data, &catalog, &OperatorConfig::default(), &tables).unwrap();
        let sub = build_scorer_subset(&data, &rw, &catalog, 0.2, 1).unwrap();
        assert_eq!(sub.len(), 160);
        assert_eq!(sub, build_scorer_subset(&data, &rw, &catalog, 0.2, 1).unwrap());
        assert_eq!(build_scorer_subset(&data, &rw, &catalog, 1.0, 1).unwrap().len(), 800);
        assert!(matches!(
            build_scorer_subset(&data, &rw, &catalog, 0.001, 1),
            Err(Error::EmptySample { .. })
        ));
    }

    #[test]
    fn pseudolabel_threshold_examples() {
        let rw = CandidateRewriteSet {
            task_id: "t".into(),
            entries: OperatorId::ALL
                .iter()
                .map(|&op| CandidateEntry {
                    patient_id: "p".into(),
                    rewrite: Rewrite::new(vec![0], RewriteSource::Operator(op)),
                })
                .collect(),
        };
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let (kept, tau) = select_by_scores(&rw, &scores, 25.0);
        assert_eq!(tau, Some(0.7));
        assert_eq!(kept.iter().map(|e| e.score).collect::<Vec<_>>(), vec![0.7, 0.8]);
        assert_eq!(select_by_scores(&rw, &scores, 100.0).0.len(), 8);
        assert_eq!(select_by_scores(&rw, &[0.5; 8], 25.0).0.len(), 8);
    }

    #[test]
    fn augmented_and_dual_shapes() {
        let (data, catalog, tables) = setup(10);
        let rw = build_candidate_rewrites(&data, &catalog, &OperatorConfig::default(), &tables).unwrap();
        let policy = RewriterPolicy::zeros(0);
        let aug = build_augmented(&data, Some(&rw), Some(&policy), 3, &catalog, 2).unwrap();
        assert_eq!(aug.examples.len(), 120);
        for e in &aug.examples {
            assert_eq!(e.label, data.get(&e.patient_id).unwrap().label);
        }
        let only = build_augmented(&data, None, None, 0, &catalog, 2).unwrap();
        assert!(only.examples.iter().all(|e| e.origin == Origin::Original) && only.examples.len() == 10);
        let small = TaskDataset {
            task_id: data.task_id.clone(),
            examples: data.examples[..5].to_vec(),
        };
        let dual = build_dual(&small, &policy, 8, &catalog, 3).unwrap();
        assert_eq!(dual.groups.len(), 5);
        assert!(dual.groups.iter().all(|g| g.candidates.len() == 8 && g.candidate_texts.len() == 8));
        assert!(build_dual(&small, &policy, 1, &catalog, 3).unwrap().groups.iter().all(|g| g.candidates.len() == 1));
    }

    #[test]
    fn split_is_disjoint_and_audited() {
        let s = generate_cohort(
            &CohortSpec {
                n_patients: 200,
                positive_rate_target: 0.2,
                ..Default::default()
            },
            MOR,
        )
        .unwrap();
        let split = split_patients(&s.cohort, MOR, (0.8, 0.1), 4).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 200);
        assert!(audit_leakage(&split, &[("train", &split.train)]).is_ok());
        let bad = vec![split.test[0].clone()];
        assert!(matches!(audit_leakage(&split, &[("scorer", &bad)]), Err(Error::Leakage { .. })));
        assert_eq!(split, split_patients(&s.cohort, MOR, (0.8, 0.1), 4).unwrap());
    }
}
