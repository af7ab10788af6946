use std::path::Path;

use ehr_rewrite::experiment::{ablation_run, AblationMode};
use ehr_rewrite::synth::CohortSpec;
use ehr_rewrite::{Cohort, FeatureCatalog, RewriterPolicy};
use ehr_rewrite_cli::manifest::Manifest;
use ehr_rewrite_cli::{run_pipeline, run_stage, run_stages, CliError, EvaluationRecord, Outcome, Overrides, RunConfig, Stage};

fn small(workdir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        cohort_spec: CohortSpec {
            n_patients: 300,
            n_features: 16,
            n_relevant: 3,
            positive_rate_target: 0.2,
            ..CohortSpec::default()
        },
        ..RunConfig::default()
    };
    cfg.experiment.n_bootstrap = 50;
    cfg.experiment.alignment.max_steps = 20;
    cfg.resolve(&Overrides {
        workdir: Some(workdir.to_path_buf()),
        seed: Some(7),
        ..Overrides::default()
    })
    .unwrap()
}

fn with(cfg: &RunConfig, o: Overrides) -> RunConfig {
    cfg.clone().resolve(&o).unwrap()
}

#[test]
fn rerun_with_unchanged_inputs_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(run_pipeline(&cfg).unwrap().iter().all(|(_, o)| *o == Outcome::Ran));
    let metrics = std::fs::read(cfg.mode_dir().join("metrics.csv")).unwrap();
    let manifest = std::fs::read(cfg.mode_dir().join("evaluate.manifest.json")).unwrap();
    assert!(run_pipeline(&cfg).unwrap().iter().all(|(_, o)| *o == Outcome::Skipped));
    assert_eq!(std::fs::read(cfg.mode_dir().join("metrics.csv")).unwrap(), metrics);
    assert_eq!(std::fs::read(cfg.mode_dir().join("evaluate.manifest.json")).unwrap(), manifest);
}

#[test]
fn changed_config_or_tampered_output_reruns_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    // A different alpha only affects the mode stages.
    let moved = with(&cfg, Overrides { alpha: Some(0.5), ..Overrides::default() });
    let outcomes = run_pipeline(&moved).unwrap();
    for (stage, outcome) in outcomes {
        assert_eq!(outcome == Outcome::Skipped, stage.is_shared(), "{stage}");
    }
    std::fs::write(cfg.workdir.join("scorer.json"), "{}").unwrap();
    assert_eq!(run_stage(Stage::TrainScorer, &moved).unwrap(), Outcome::Ran);
}

#[test]
fn evaluate_before_train_predictor_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_stages(&[Stage::GenData, Stage::BuildRewrites, Stage::TrainScorer, Stage::BuildDrw, Stage::TrainRewriter], &cfg).unwrap();
    let err = run_stage(Stage::Evaluate, &cfg).unwrap_err();
    match &err {
        CliError::MissingArtifact(p) => assert!(p.ends_with("modes/full/predictor_final.json"), "{}", p.display()),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("predictor_final.json"));
    // The failed stage released the lock.
    assert!(!cfg.workdir.join(".lock").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let err = cfg.clone().resolve(&Overrides { alpha: Some(1.5), ..Overrides::default() }).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("alpha"));
    let err = cfg.clone().resolve(&Overrides { task: Some("sepsis".into()), ..Overrides::default() }).unwrap_err();
    assert!(err.to_string().contains("task"));

    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"not_a_field": 1}"#).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("not_a_field"));
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    std::fs::write(cfg.workdir.join(".lock"), "1").unwrap();
    let err = run_stage(Stage::GenData, &cfg).unwrap_err();
    assert!(matches!(err, CliError::Locked(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn staged_run_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    let record: EvaluationRecord =
        serde_json::from_str(&std::fs::read_to_string(cfg.mode_dir().join("metrics.json")).unwrap()).unwrap();
    let cohort = Cohort::load(cfg.cohort_path(), &[cfg.task.as_str()]).unwrap();
    let catalog = FeatureCatalog::load(cfg.catalog_path()).unwrap();
    let direct = ablation_run(AblationMode::Full, &cohort, &catalog, &cfg.experiment).unwrap();
    assert_eq!(record.report, direct.report);
    assert_eq!(record.alpha, direct.alpha);
    assert_eq!(RewriterPolicy::load(cfg.mode_dir().join("rewriter.json")).unwrap(), direct.policy);
}

#[test]
fn no_kl_mode_keeps_the_likelihood_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(&small(dir.path()), Overrides { mode: Some(AblationMode::NoKl), ..Overrides::default() });
    run_pipeline(&cfg).unwrap();
    let mle = RewriterPolicy::load(cfg.mode_dir().join("rewriter_mle.json")).unwrap();
    assert_eq!(RewriterPolicy::load(cfg.mode_dir().join("rewriter.json")).unwrap(), mle);
    assert!(cfg.workdir.join("modes/no_kl/metrics.csv").is_file());
}

#[test]
fn sweeps_emit_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    run_stage(Stage::Sweep, &cfg).unwrap();
    let lambda = with(&cfg, Overrides { sweep: Some(ehr_rewrite_cli::SweepAxis::Lambda), ..Overrides::default() });
    run_stage(Stage::Sweep, &lambda).unwrap();
    let rows = |name: &str| {
        let mut r = csv::Reader::from_path(cfg.mode_dir().join(name)).unwrap();
        r.records().map(|x| x.unwrap()).collect::<Vec<_>>()
    };
    let alphas: Vec<String> = rows("sweep_alpha.csv").iter().map(|r| r[2].to_string()).collect();
    assert_eq!(alphas, ["0", "0.25", "0.5", "0.75", "1"]);
    let lambdas: Vec<String> = rows("sweep_lambda.csv").iter().map(|r| r[3].to_string()).collect();
    assert_eq!(lambdas, ["0", "0.25", "0.5", "0.75"]);
}

#[test]
fn manifests_chain_metrics_back_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    let load = |p: &str| Manifest::load(&cfg.workdir.join(p)).unwrap();
    let evaluate = load("modes/full/evaluate.manifest.json");
    let inoculate = load("modes/full/inoculate.manifest.json");
    assert_eq!(evaluate.inputs["modes/full/predictor_final.json"], inoculate.outputs["modes/full/predictor_final.json"]);
    let gen = load("gen-data.manifest.json");
    assert_eq!(evaluate.inputs["cohort.jsonl"], gen.outputs["cohort.jsonl"]);
    assert_eq!(evaluate.seed, 7);
    assert_eq!(evaluate.config["seed"], 7);
    assert!(gen.config.get("mode").is_none());
}

#[test]
fn different_seeds_give_different_cohorts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = small(a.path());
    let cb = with(&small(b.path()), Overrides { seed: Some(8), ..Overrides::default() });
    run_stage(Stage::GenData, &ca).unwrap();
    run_stage(Stage::GenData, &cb).unwrap();
    assert_ne!(std::fs::read(ca.cohort_path()).unwrap(), std::fs::read(cb.cohort_path()).unwrap());
}
