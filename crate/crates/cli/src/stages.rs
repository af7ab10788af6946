use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use ehr_rewrite::alignment::write_log;
use ehr_rewrite::eval::ALPHA_GRID;
use ehr_rewrite::experiment::{self, AblationMode, Datasets};
use ehr_rewrite::pipeline::{read_jsonl, write_jsonl, CandidateRewriteSet, PseudoLabelDataset, SelectionMeta, Split};
use ehr_rewrite::synth::generate_cohort;
use ehr_rewrite::{Cohort, FeatureCatalog, MetricReport, PredictorModel, RewriterPolicy};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{create, sha256_bytes, sha256_file, Manifest, WorkdirLock};

pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    BuildRewrites,
    TrainScorer,
    BuildDrw,
    TrainRewriter,
    TrainPredictor,
    KlAlign,
    Inoculate,
    Evaluate,
    Sweep,
}

impl Stage {
    /// Every stage up to and including evaluation, in dependency order.
    pub const PIPELINE: [Stage; 9] = [
        Stage::GenData,
        Stage::BuildRewrites,
        Stage::TrainScorer,
        Stage::BuildDrw,
        Stage::TrainRewriter,
        Stage::TrainPredictor,
        Stage::KlAlign,
        Stage::Inoculate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::BuildRewrites => "build-rewrites",
            Stage::TrainScorer => "train-scorer",
            Stage::BuildDrw => "build-drw",
            Stage::TrainRewriter => "train-rewriter",
            Stage::TrainPredictor => "train-predictor",
            Stage::KlAlign => "kl-align",
            Stage::Inoculate => "inoculate",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
        }
    }

    /// Shared stages write to the workdir root and do not depend on the mode.
    pub fn is_shared(self) -> bool {
        matches!(self, Stage::GenData | Stage::BuildRewrites | Stage::TrainScorer | Stage::BuildDrw)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[default]
    Alpha,
    Lambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Manifest matched; nothing was recomputed.
    Skipped,
}

// Artifact file names.
pub const SPLIT: &str = "split.json";
pub const SCORE_TABLES: &str = "score_tables.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const SCORER: &str = "scorer.json";
pub const PSEUDO_LABELS: &str = "pseudo_labels.jsonl";
pub const PSEUDO_LABELS_META: &str = "pseudo_labels_meta.json";
pub const ORACLE: &str = "oracle.json";
pub const REWRITER_MLE: &str = "rewriter_mle.json";
pub const PREDICTOR: &str = "predictor.json";
pub const REWRITER: &str = "rewriter.json";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const PREDICTOR_FINAL: &str = "predictor_final.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// The evaluate stage's JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub task: String,
    pub mode: AblationMode,
    pub alpha: f64,
    pub lambda: f64,
    /// Validation AUROC per alpha on the grid.
    pub val_auroc: BTreeMap<String, f64>,
    pub report: MetricReport,
}

struct Paths<'a> {
    cfg: &'a RunConfig,
}

impl Paths<'_> {
    fn root(&self, name: &str) -> PathBuf {
        self.cfg.workdir.join(name)
    }

    fn mode(&self, name: &str) -> PathBuf {
        self.cfg.mode_dir().join(name)
    }

    fn data(&self) -> Vec<PathBuf> {
        vec![self.cfg.cohort_path(), self.cfg.catalog_path(), self.root(SPLIT)]
    }

    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let mut v = match stage {
            Stage::GenData => return Vec::new(),
            Stage::BuildRewrites => return vec![self.cfg.cohort_path(), self.cfg.catalog_path()],
            Stage::TrainScorer => vec![self.root(CANDIDATES)],
            Stage::BuildDrw => vec![self.root(CANDIDATES), self.root(SCORER)],
            Stage::TrainRewriter => vec![self.root(PSEUDO_LABELS), self.root(PSEUDO_LABELS_META)],
            Stage::TrainPredictor => vec![self.root(CANDIDATES), self.mode(REWRITER_MLE)],
            Stage::KlAlign => vec![
                self.mode(PREDICTOR),
                self.mode(REWRITER_MLE),
                self.root(PSEUDO_LABELS),
                self.root(PSEUDO_LABELS_META),
            ],
            Stage::Inoculate => vec![self.mode(PREDICTOR), self.mode(REWRITER)],
            Stage::Evaluate => vec![self.mode(PREDICTOR_FINAL), self.mode(REWRITER)],
            Stage::Sweep => match self.cfg.sweep {
                SweepAxis::Alpha => vec![self.mode(PREDICTOR_FINAL), self.mode(REWRITER)],
                SweepAxis::Lambda => vec![
                    self.mode(PREDICTOR),
                    self.mode(REWRITER_MLE),
                    self.root(PSEUDO_LABELS),
                    self.root(PSEUDO_LABELS_META),
                ],
            },
        };
        // Stage-specific inputs first, so a missing checkpoint is what gets
        // reported rather than the shared data it was built from.
        v.extend(self.data());
        v
    }

    fn manifest(&self, stage: Stage) -> PathBuf {
        let name = format!("{}.manifest.json", stage.name());
        if stage.is_shared() {
            self.root(&name)
        } else {
            self.mode(&name)
        }
    }
}

/// Key under which a path is recorded in a manifest: relative to the workdir
/// when inside it.
fn key(workdir: &Path, p: &Path) -> String {
    p.strip_prefix(workdir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Experiment settings read only by mode stages; changing them leaves the
/// shared artifacts valid.
const MODE_ONLY_FIELDS: [&str; 9] = [
    "mle",
    "alignment",
    "policy_rewrites_per_patient",
    "no_drw_samples",
    "inoculation",
    "inference",
    "alpha",
    "n_bootstrap",
    "bucket_edges",
];

/// The config as echoed into a stage manifest. The workdir is left out so a
/// moved workdir stays valid; shared stages also ignore the mode.
pub fn config_echo(cfg: &RunConfig, stage: Stage) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    obj.remove("workdir");
    if stage.is_shared() {
        obj.remove("mode");
        let x = obj["experiment"].as_object_mut().expect("experiment is an object");
        for field in MODE_ONLY_FIELDS {
            x.remove(field);
        }
    }
    if stage != Stage::Sweep {
        obj.remove("sweep");
    }
    v
}

/// Runs `stages` in order under one workdir lock.
pub fn run_stages(stages: &[Stage], cfg: &RunConfig) -> CliResult<Vec<(Stage, Outcome)>> {
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    stages.iter().map(|&s| Ok((s, execute(s, cfg)?))).collect()
}

pub fn run_stage(stage: Stage, cfg: &RunConfig) -> CliResult<Outcome> {
    Ok(run_stages(&[stage], cfg)?[0].1)
}

/// All stages through evaluation. gen-data is left out when the cohort is
/// external.
pub fn run_pipeline(cfg: &RunConfig) -> CliResult<Vec<(Stage, Outcome)>> {
    let stages: Vec<Stage> = Stage::PIPELINE
        .into_iter()
        .filter(|&s| s != Stage::GenData || cfg.cohort.is_none())
        .collect();
    run_stages(&stages, cfg)
}

fn execute(stage: Stage, cfg: &RunConfig) -> CliResult<Outcome> {
    let paths = Paths { cfg };
    let mut inputs = BTreeMap::new();
    for p in paths.inputs(stage) {
        if !p.is_file() {
            return Err(CliError::MissingArtifact(p));
        }
        inputs.insert(key(&cfg.workdir, &p), sha256_file(&p)?);
    }
    let echo = config_echo(cfg, stage);
    let config_hash = sha256_bytes(serde_json::to_string(&echo)?.as_bytes());
    let manifest_path = paths.manifest(stage);
    if let Some(m) = Manifest::load(&manifest_path) {
        if m.is_current(&cfg.workdir, &inputs, &config_hash) {
            log::info!("{stage}: up to date");
            return Ok(Outcome::Skipped);
        }
    }
    log::info!("{stage}: running");
    let start = Instant::now();
    let outputs = body(stage, cfg, &paths)?;
    let mut out_hashes = BTreeMap::new();
    for p in outputs {
        out_hashes.insert(key(&cfg.workdir, &p), sha256_file(&p)?);
    }
    let manifest = Manifest {
        stage: stage.name().to_string(),
        inputs,
        outputs: out_hashes,
        config_hash,
        config: echo,
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    manifest.save(&manifest_path)?;
    log::info!("{stage}: done in {:.1}s", manifest.wall_time_s);
    Ok(Outcome::Ran)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

struct Loaded {
    catalog: FeatureCatalog,
    data: Datasets,
}

fn load_cohort(cfg: &RunConfig) -> CliResult<(Cohort, FeatureCatalog)> {
    let cohort = Cohort::load(cfg.cohort_path(), &[cfg.task.as_str()])?;
    let catalog = FeatureCatalog::load(cfg.catalog_path())?;
    Ok((cohort, catalog))
}

fn load(cfg: &RunConfig, paths: &Paths<'_>) -> CliResult<Loaded> {
    let (cohort, catalog) = load_cohort(cfg)?;
    let split: Split = read_json(&paths.root(SPLIT))?;
    let data = Datasets::from_split(&cohort, &cfg.task, split)?;
    Ok(Loaded { catalog, data })
}

fn load_candidates(cfg: &RunConfig, paths: &Paths<'_>) -> CliResult<CandidateRewriteSet> {
    Ok(CandidateRewriteSet {
        task_id: cfg.task.clone(),
        entries: read_jsonl(paths.root(CANDIDATES))?,
    })
}

fn load_pseudo_labels(paths: &Paths<'_>) -> CliResult<PseudoLabelDataset> {
    let selection_meta: SelectionMeta = read_json(&paths.root(PSEUDO_LABELS_META))?;
    Ok(PseudoLabelDataset {
        entries: read_jsonl(paths.root(PSEUDO_LABELS))?,
        selection_meta,
    })
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(MetricReport::csv_header())?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn body(stage: Stage, cfg: &RunConfig, paths: &Paths<'_>) -> CliResult<Vec<PathBuf>> {
    let x = &cfg.experiment;
    if !stage.is_shared() {
        ensure_dir(&cfg.mode_dir())?;
    }
    match stage {
        Stage::GenData => {
            if cfg.cohort.is_some() {
                return Err(CliError::config("cohort", "gen-data only writes synthetic cohorts; unset cohort and catalog"));
            }
            ensure_dir(&cfg.workdir)?;
            let syn = generate_cohort(&cfg.cohort_spec, &cfg.task)?;
            let (c, k, o) = (cfg.cohort_path(), cfg.catalog_path(), paths.root(ORACLE));
            syn.cohort.save(&c)?;
            syn.catalog.save(&k)?;
            write_json(&o, &syn)?;
            Ok(vec![c, k, o])
        }
        Stage::BuildRewrites => {
            let (cohort, catalog) = load_cohort(cfg)?;
            let data = Datasets::new(&cohort, x)?;
            let (tables, candidates) = experiment::fit_operators(&data, &catalog, x)?;
            let (s, t, c) = (paths.root(SPLIT), paths.root(SCORE_TABLES), paths.root(CANDIDATES));
            write_json(&s, &data.split)?;
            write_json(&t, &tables)?;
            write_jsonl(&c, &candidates.entries)?;
            Ok(vec![s, t, c])
        }
        Stage::TrainScorer => {
            let l = load(cfg, paths)?;
            let candidates = load_candidates(cfg, paths)?;
            let scorer = experiment::train_scorer(&l.data, &candidates, &l.catalog, x)?;
            let p = paths.root(SCORER);
            scorer.save(&p)?;
            Ok(vec![p])
        }
        Stage::BuildDrw => {
            let l = load(cfg, paths)?;
            let candidates = load_candidates(cfg, paths)?;
            let scorer = PredictorModel::load(paths.root(SCORER))?;
            let pl = experiment::build_drw(&l.data, &candidates, &scorer, &l.catalog, x)?;
            let (p, m) = (paths.root(PSEUDO_LABELS), paths.root(PSEUDO_LABELS_META));
            write_jsonl(&p, &pl.entries)?;
            write_json(&m, &pl.selection_meta)?;
            Ok(vec![p, m])
        }
        Stage::TrainRewriter => {
            let l = load(cfg, paths)?;
            let pairs = experiment::rewriter_pairs(cfg.mode, &l.data, &load_pseudo_labels(paths)?, &l.catalog, x)?;
            let policy = experiment::train_rewriter(cfg.mode, &pairs, x)?;
            let p = paths.mode(REWRITER_MLE);
            policy.save(&p)?;
            Ok(vec![p])
        }
        Stage::TrainPredictor => {
            let l = load(cfg, paths)?;
            let candidates = load_candidates(cfg, paths)?;
            let policy = RewriterPolicy::load(paths.mode(REWRITER_MLE))?;
            let predictor = experiment::train_predictor(&l.data, &candidates, &policy, &l.catalog, x)?;
            let p = paths.mode(PREDICTOR);
            predictor.save(&p)?;
            Ok(vec![p])
        }
        Stage::KlAlign => {
            let l = load(cfg, paths)?;
            let (policy, log) = align_from_disk(cfg, paths, &l, x)?;
            let (p, g) = (paths.mode(REWRITER), paths.mode(TRAINING_LOG));
            policy.save(&p)?;
            write_log(&g, &log)?;
            Ok(vec![p, g])
        }
        Stage::Inoculate => {
            let l = load(cfg, paths)?;
            let predictor = PredictorModel::load(paths.mode(PREDICTOR))?;
            let policy = RewriterPolicy::load(paths.mode(REWRITER))?;
            let out = experiment::inoculate_predictor(&l.data, &predictor, &policy, &l.catalog, x)?;
            let p = paths.mode(PREDICTOR_FINAL);
            out.save(&p)?;
            Ok(vec![p])
        }
        Stage::Evaluate => {
            let l = load(cfg, paths)?;
            let predictor = PredictorModel::load(paths.mode(PREDICTOR_FINAL))?;
            let policy = RewriterPolicy::load(paths.mode(REWRITER))?;
            let record = evaluate(cfg, &l, &predictor, &policy, x)?;
            let (j, c) = (paths.mode(METRICS_JSON), paths.mode(METRICS_CSV));
            write_json(&j, &record)?;
            write_csv(&c, &[record.report.csv_row(&record.task, cfg.mode.name(), record.alpha, record.lambda)])?;
            Ok(vec![j, c])
        }
        Stage::Sweep => {
            let l = load(cfg, paths)?;
            let mut rows = Vec::new();
            let out = match cfg.sweep {
                SweepAxis::Alpha => {
                    let predictor = PredictorModel::load(paths.mode(PREDICTOR_FINAL))?;
                    let policy = RewriterPolicy::load(paths.mode(REWRITER))?;
                    for a in ALPHA_GRID {
                        let report = experiment::evaluate_ensemble(&predictor, &policy, &l.data.test, &l.catalog, &x.inference, a, x)?;
                        rows.push(report.csv_row(&cfg.task, cfg.mode.name(), a, x.alignment.lambda_mix));
                    }
                    paths.mode("sweep_alpha.csv")
                }
                SweepAxis::Lambda => {
                    let predictor = PredictorModel::load(paths.mode(PREDICTOR))?;
                    for lambda in LAMBDA_GRID {
                        let mut xl = x.clone();
                        xl.alignment.lambda_mix = lambda;
                        let (policy, _) = align_from_disk(cfg, paths, &l, &xl)?;
                        let inoculated = experiment::inoculate_predictor(&l.data, &predictor, &policy, &l.catalog, &xl)?;
                        let r = evaluate(cfg, &l, &inoculated, &policy, &xl)?;
                        rows.push(r.report.csv_row(&cfg.task, cfg.mode.name(), r.alpha, lambda));
                    }
                    paths.mode("sweep_lambda.csv")
                }
            };
            write_csv(&out, &rows)?;
            Ok(vec![out])
        }
    }
}

fn align_from_disk(
    cfg: &RunConfig,
    paths: &Paths<'_>,
    l: &Loaded,
    x: &experiment::ExperimentConfig,
) -> CliResult<(RewriterPolicy, Vec<ehr_rewrite::alignment::TrainLogEntry>)> {
    let predictor = PredictorModel::load(paths.mode(PREDICTOR))?;
    let policy = RewriterPolicy::load(paths.mode(REWRITER_MLE))?;
    let pairs = experiment::rewriter_pairs(cfg.mode, &l.data, &load_pseudo_labels(paths)?, &l.catalog, x)?;
    Ok(experiment::align(cfg.mode, &l.data, &predictor, &policy, &pairs, &l.catalog, x)?)
}

fn evaluate(
    cfg: &RunConfig,
    l: &Loaded,
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    x: &experiment::ExperimentConfig,
) -> CliResult<EvaluationRecord> {
    let (alpha, val_auroc) = experiment::choose_alpha(predictor, policy, &l.data.val, &l.catalog, x)?;
    let report = experiment::evaluate_ensemble(predictor, policy, &l.data.test, &l.catalog, &x.inference, alpha, x)?;
    Ok(EvaluationRecord {
        task: cfg.task.clone(),
        mode: cfg.mode,
        alpha,
        lambda: x.alignment.lambda_mix,
        val_auroc,
        report,
    })
}
