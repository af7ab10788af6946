//! End-to-end runs: the full rewrite-align-inoculate pipeline, its ablations
//! and the original-only baseline, all on one seeded split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{kl_train, AlignmentConfig, PolicyEvaluator, TrainLogEntry};
use crate::cohort::Cohort;
use crate::ehr::{token_length, verbalize, FeatureCatalog};
use crate::error::{Error, Result};
use crate::eval::{auroc, evaluate_scores, EnsembleCache, InferenceConfig, MetricReport, ALPHA_GRID};
use crate::pipeline::{
    align_groups, audit_leakage, build_augmented, build_candidate_rewrites, build_dual, build_scorer_subset,
    sample_scorer_patients, select_pseudolabels, CandidateRewriteSet, PseudoLabel, PseudoLabelDataset, Split,
    TaskDataset,
};
use crate::predictor::{inoculate, train, Architecture, InoculationConfig, PredictorModel, TrainConfig};
use crate::rewriter::{mle_finetune, sample_rewrites, MaskExample, MleConfig, RewriterPolicy};
use crate::select::{OperatorConfig, ScoreTables};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoDrw,
    NoRewriter,
    NoKl,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::Full, AblationMode::NoDrw, AblationMode::NoRewriter, AblationMode::NoKl];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoDrw => "no_drw",
            AblationMode::NoRewriter => "no_rewriter",
            AblationMode::NoKl => "no_kl",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task_id: String,
    /// Train and validation shares; the rest is test.
    pub split: (f64, f64),
    pub operator: OperatorConfig,
    pub scorer_fraction: f64,
    pub k_percent: f64,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub mle: MleConfig,
    pub alignment: AlignmentConfig,
    pub policy_rewrites_per_patient: usize,
    /// Untrained-policy samples per EHR standing in for pseudo-labels when
    /// they are ablated.
    pub no_drw_samples: usize,
    pub inoculation: InoculationConfig,
    pub inference: InferenceConfig,
    /// Fixed interpolation weight; `None` picks it on validation from the grid.
    pub alpha: Option<f64>,
    pub n_bootstrap: usize,
    pub bucket_edges: (usize, usize),
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task_id: crate::synth::MOR.to_string(),
            split: (0.5, 0.25),
            operator: OperatorConfig::default(),
            scorer_fraction: 0.2,
            k_percent: 25.0,
            arch: Architecture {
                hidden_units: 0,
                ..Architecture::default()
            },
            train: TrainConfig {
                learning_rate: 2.0,
                ..TrainConfig::default()
            },
            mle: MleConfig::default(),
            alignment: AlignmentConfig::default(),
            policy_rewrites_per_patient: 3,
            no_drw_samples: 4,
            inoculation: InoculationConfig::default(),
            inference: InferenceConfig::default(),
            alpha: None,
            n_bootstrap: 1000,
            bucket_edges: crate::eval::DEFAULT_BUCKET_EDGES,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Copies the global seed into every component seed.
    pub fn with_seed(mut self, seed_value: u64) -> Self {
        self.seed = seed_value;
        self.operator.rng_seed = seed::derive(seed_value, &["operators"]);
        self.train.rng_seed = seed::derive(seed_value, &["predictor"]);
        self.alignment.rng_seed = seed::derive(seed_value, &["alignment"]);
        self.inference.seed = seed::derive(seed_value, &["inference"]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.operator.validate()?;
        self.train.validate()?;
        self.alignment.validate()?;
        self.inference.validate()?;
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("alpha", "must lie in [0, 1]"));
            }
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::config("k_percent", "must lie in (0, 100]"));
        }
        if self.n_bootstrap == 0 {
            return Err(Error::config("n_bootstrap", "must be at least 1"));
        }
        Ok(())
    }
}

/// The task split into its three datasets.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub split: Split,
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

impl Datasets {
    pub fn new(cohort: &Cohort, config: &ExperimentConfig) -> Result<Self> {
        let split = crate::pipeline::split_patients(cohort, &config.task_id, config.split, config.seed)?;
        Self::from_split(cohort, &config.task_id, split)
    }

    /// Rebuilds the datasets of a saved split.
    pub fn from_split(cohort: &Cohort, task_id: &str, split: Split) -> Result<Self> {
        Ok(Datasets {
            train: TaskDataset::from_cohort(cohort, task_id, Some(&split.train))?,
            val: TaskDataset::from_cohort(cohort, task_id, Some(&split.val))?,
            test: TaskDataset::from_cohort(cohort, task_id, Some(&split.test))?,
            split,
        })
    }
}

/// Stage outputs shared by every mode: score tables, candidates, scorer and
/// pseudo-labels, all fit on the training split.
#[derive(Clone, Debug)]
pub struct RewriteStage {
    pub tables: ScoreTables,
    pub candidates: CandidateRewriteSet,
    pub scorer: PredictorModel,
    pub pseudo_labels: PseudoLabelDataset,
}

pub fn rewrite_stage(data: &Datasets, catalog: &FeatureCatalog, config: &ExperimentConfig) -> Result<RewriteStage> {
    let (tables, candidates) = fit_operators(data, catalog, config)?;
    let scorer = train_scorer(data, &candidates, catalog, config)?;
    let pseudo_labels = build_drw(data, &candidates, &scorer, catalog, config)?;
    Ok(RewriteStage {
        tables,
        candidates,
        scorer,
        pseudo_labels,
    })
}

/// Score tables and the eight operator rewrites of every training patient.
pub fn fit_operators(
    data: &Datasets,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<(ScoreTables, CandidateRewriteSet)> {
    let tables = ScoreTables::fit(&config.task_id, &data.train.labelled(), catalog, &config.operator)?;
    audit_leakage(&data.split, &[("score_tables", &data.train.ids())])?;
    let candidates = build_candidate_rewrites(&data.train, catalog, &config.operator, &tables)?;
    Ok((tables, candidates))
}

/// Task scorer on the rewrites of a seeded training subset, early-stopped on
/// validation originals.
pub fn train_scorer(
    data: &Datasets,
    candidates: &CandidateRewriteSet,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<PredictorModel> {
    let scorer_ids = sample_scorer_patients(&data.train, config.scorer_fraction, config.seed)?;
    audit_leakage(&data.split, &[("scorer_subset", &scorer_ids)])?;
    let subset = build_scorer_subset(&data.train, candidates, catalog, config.scorer_fraction, config.seed)?;
    let scorer_config = TrainConfig {
        rng_seed: seed::derive(config.seed, &["scorer"]),
        ..config.train.clone()
    };
    train(config.arch, &subset, &scorer_config, &data.val.texts(catalog)?)
}

/// Scorer-filtered pseudo-labels at the top `k_percent`.
pub fn build_drw(
    data: &Datasets,
    candidates: &CandidateRewriteSet,
    scorer: &PredictorModel,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<PseudoLabelDataset> {
    select_pseudolabels(&[(&data.train, candidates, scorer)], catalog, config.k_percent)
}

/// Likelihood-training pairs for `mode`. Without pseudo-labels they are
/// samples of the untrained policy.
pub fn rewriter_pairs(
    mode: AblationMode,
    data: &Datasets,
    pseudo_labels: &PseudoLabelDataset,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<Vec<MaskExample>> {
    match mode {
        AblationMode::NoDrw => {
            let untrained = RewriterPolicy::zeros(config.seed);
            let sample_seed = seed::derive(config.seed, &["no-drw"]);
            let mut pl = PseudoLabelDataset::default();
            for ex in &data.train.examples {
                for rewrite in sample_rewrites(&untrained, &ex.ehr, catalog, config.no_drw_samples, sample_seed)? {
                    pl.entries.push(PseudoLabel {
                        patient_id: ex.ehr.patient_id.clone(),
                        source_task: config.task_id.clone(),
                        rewrite,
                        score: f64::NAN,
                    });
                }
            }
            pl.mask_examples(&[&data.train], catalog)
        }
        _ => pseudo_labels.mask_examples(&[&data.train], catalog),
    }
}

/// Likelihood fine-tuning from the untrained policy; skipped when the mode
/// has no rewriter.
pub fn train_rewriter(mode: AblationMode, pairs: &[MaskExample], config: &ExperimentConfig) -> Result<RewriterPolicy> {
    let untrained = RewriterPolicy::zeros(config.seed);
    if mode == AblationMode::NoRewriter {
        return Ok(untrained);
    }
    Ok(mle_finetune(&untrained, pairs, &config.mle)?.0)
}

/// Predictor on originals, operator rewrites and policy rewrites.
pub fn train_predictor(
    data: &Datasets,
    candidates: &CandidateRewriteSet,
    policy: &RewriterPolicy,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<PredictorModel> {
    let augmented = build_augmented(
        &data.train,
        Some(candidates),
        Some(policy),
        config.policy_rewrites_per_patient,
        catalog,
        config.seed,
    )?;
    train(config.arch, &augmented.pairs(), &config.train, &data.val.texts(catalog)?)
}

/// KL alignment with validation-AUROC checkpoint selection. The no_kl mode
/// returns the policy unchanged.
pub fn align(
    mode: AblationMode,
    data: &Datasets,
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    pairs: &[MaskExample],
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<(RewriterPolicy, Vec<TrainLogEntry>)> {
    if mode == AblationMode::NoKl {
        return Ok((policy.clone(), Vec::new()));
    }
    let dual = build_dual(&data.train, policy, config.alignment.n_i, catalog, config.seed)?;
    let groups = align_groups(&dual, &data.train, predictor, catalog, config.alignment.tau)?;
    let val_labels = data.val.labels();
    let val_ehrs: Vec<_> = data.val.examples.iter().map(|e| &e.ehr).collect();
    let eval_alpha = config.alpha.unwrap_or(config.inference.alpha);
    let mut evaluate = |p: &RewriterPolicy| -> Result<f64> {
        let cache = EnsembleCache::build(predictor, p, &val_ehrs, catalog, &config.inference)?;
        auroc(&cache.scores(eval_alpha), &val_labels)
    };
    let evaluator: Option<PolicyEvaluator<'_>> =
        if val_labels.contains(&0) && val_labels.contains(&1) { Some(&mut evaluate) } else { None };
    kl_train(policy, &groups, pairs, &config.alignment, evaluator)
}

/// Low-rate continuation on one aligned-policy rewrite per training patient.
pub fn inoculate_predictor(
    data: &Datasets,
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<PredictorModel> {
    let inoc_seed = seed::derive(config.seed, &["inoculation"]);
    let mut examples = Vec::with_capacity(data.train.len());
    for ex in &data.train.examples {
        for rw in sample_rewrites(policy, &ex.ehr, catalog, 1, inoc_seed)? {
            examples.push((verbalize(&rw.materialize(&ex.ehr)?, catalog)?.text, ex.label));
        }
    }
    inoculate(predictor, &examples, &config.train, &config.inoculation, &data.val.texts(catalog)?)
}

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: AblationMode,
    pub alpha: f64,
    pub report: MetricReport,
    /// Validation AUROC per alpha on the grid.
    pub val_auroc: BTreeMap<String, f64>,
    pub policy_mle: RewriterPolicy,
    pub policy: RewriterPolicy,
    pub predictor: PredictorModel,
    pub training_log: Vec<TrainLogEntry>,
}

/// Runs one mode from the shared rewrite stage.
pub fn run_mode(
    mode: AblationMode,
    data: &Datasets,
    stage: &RewriteStage,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<ModeResult> {
    let pairs = rewriter_pairs(mode, data, &stage.pseudo_labels, catalog, config)?;
    let policy_mle = train_rewriter(mode, &pairs, config)?;
    let predictor = train_predictor(data, &stage.candidates, &policy_mle, catalog, config)?;
    let (policy, training_log) = align(mode, data, &predictor, &policy_mle, &pairs, catalog, config)?;
    let predictor = inoculate_predictor(data, &predictor, &policy, catalog, config)?;
    let (alpha, val_auroc) = choose_alpha(&predictor, &policy, &data.val, catalog, config)?;
    let report = evaluate_ensemble(&predictor, &policy, &data.test, catalog, &config.inference, alpha, config)?;
    Ok(ModeResult {
        mode,
        alpha,
        report,
        val_auroc,
        policy_mle,
        policy,
        predictor,
        training_log,
    })
}

/// Picks alpha on validation (highest AUROC, smallest alpha on ties), unless fixed.
pub fn choose_alpha(
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    val: &TaskDataset,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let labels = val.labels();
    let ehrs: Vec<_> = val.examples.iter().map(|e| &e.ehr).collect();
    let cache = EnsembleCache::build(predictor, policy, &ehrs, catalog, &config.inference)?;
    let mut table = BTreeMap::new();
    let mut best: Option<(f64, f64)> = None;
    for a in ALPHA_GRID {
        let Ok(v) = auroc(&cache.scores(a), &labels) else {
            break;
        };
        table.insert(format!("{a}"), v);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    let chosen = config.alpha.or(best.map(|b| b.0)).unwrap_or(config.inference.alpha);
    Ok((chosen, table))
}

/// Ensemble scores on `data` at `alpha`, bootstrapped and stratified.
pub fn evaluate_ensemble(
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    data: &TaskDataset,
    catalog: &FeatureCatalog,
    inference: &InferenceConfig,
    alpha: f64,
    config: &ExperimentConfig,
) -> Result<MetricReport> {
    let ehrs: Vec<_> = data.examples.iter().map(|e| &e.ehr).collect();
    let cache = EnsembleCache::build(predictor, policy, &ehrs, catalog, inference)?;
    let lengths = data
        .examples
        .iter()
        .map(|e| Ok(token_length(&verbalize(&e.ehr, catalog)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(
        &cache.scores(alpha),
        &data.labels(),
        &lengths,
        config.n_bootstrap,
        seed::derive(config.seed, &["bootstrap"]),
        config.bucket_edges,
    )
}

/// Predictor trained on original records only, evaluated without rewrites.
pub fn baseline_run(data: &Datasets, catalog: &FeatureCatalog, config: &ExperimentConfig) -> Result<(PredictorModel, MetricReport)> {
    let predictor = train(config.arch, &data.train.texts(catalog)?, &config.train, &data.val.texts(catalog)?)?;
    let report = evaluate_ensemble(
        &predictor,
        &RewriterPolicy::zeros(config.seed),
        &data.test,
        catalog,
        &InferenceConfig {
            alpha: 0.0,
            n_rewrites: 1,
            ..config.inference.clone()
        },
        0.0,
        config,
    )?;
    Ok((predictor, report))
}

/// One ablation mode end to end.
pub fn ablation_run(mode: AblationMode, cohort: &Cohort, catalog: &FeatureCatalog, config: &ExperimentConfig) -> Result<ModeResult> {
    config.validate()?;
    let data = Datasets::new(cohort, config)?;
    let stage = rewrite_stage(&data, catalog, config)?;
    run_mode(mode, &data, &stage, catalog, config)
}

#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub baseline: MetricReport,
    pub modes: BTreeMap<AblationMode, ModeResult>,
    /// Candidate and policy rewrites checked against their sources, and the
    /// number that were not subsets.
    pub rewrites_checked: usize,
    pub subset_violations: usize,
}

/// Baseline plus every mode on one shared split and rewrite stage.
pub fn run_benchmark(cohort: &Cohort, catalog: &FeatureCatalog, config: &ExperimentConfig, modes: &[AblationMode]) -> Result<BenchmarkResult> {
    config.validate()?;
    let data = Datasets::new(cohort, config)?;
    let stage = rewrite_stage(&data, catalog, config)?;
    let (_, baseline) = baseline_run(&data, catalog, config)?;
    let mut out = BTreeMap::new();
    for &m in modes {
        out.insert(m, run_mode(m, &data, &stage, catalog, config)?);
    }
    let (checked, violations) = audit_subsets(&data, &stage, out.values().map(|r| &r.policy), catalog, config)?;
    Ok(BenchmarkResult {
        baseline,
        modes: out,
        rewrites_checked: checked,
        subset_violations: violations,
    })
}

/// Materializes operator candidates and fresh policy samples and checks each
/// against its source by multiset inclusion.
fn audit_subsets<'a>(
    data: &Datasets,
    stage: &RewriteStage,
    policies: impl Iterator<Item = &'a RewriterPolicy>,
    catalog: &FeatureCatalog,
    config: &ExperimentConfig,
) -> Result<(usize, usize)> {
    let mut checked = 0;
    let mut bad = 0;
    for e in &stage.candidates.entries {
        let src = &data.train.get(&e.patient_id).expect("candidate patient in train").ehr;
        checked += 1;
        bad += !crate::ehr::is_subset(src, &e.rewrite.materialize(src)?) as usize;
    }
    let audit_seed = seed::derive(config.seed, &["subset-audit"]);
    for p in policies {
        let mut pool: Vec<_> = data.test.examples.iter().collect();
        pool.shuffle(&mut seed::rng(audit_seed));
        for ex in pool.into_iter().take(200) {
            for rw in sample_rewrites(p, &ex.ehr, catalog, 2, audit_seed)? {
                checked += 1;
                bad += !crate::ehr::is_subset(&ex.ehr, &rw.materialize(&ex.ehr)?) as usize;
            }
        }
    }
    Ok((checked, bad))
}
