use std::path::{Path, PathBuf};

use ehr_rewrite::experiment::{AblationMode, ExperimentConfig};
use ehr_rewrite::synth::{CohortSpec, LOS, MOR, RA};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::stages::SweepAxis;

/// Everything a run needs. Loaded from one JSON file, then flags override.
/// The global seed is copied into the cohort spec and every component seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// External cohort JSONL; when unset, gen-data writes one into the workdir.
    pub cohort: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub workdir: PathBuf,
    pub task: String,
    pub cohort_spec: CohortSpec,
    pub experiment: ExperimentConfig,
    pub mode: AblationMode,
    pub sweep: SweepAxis,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: None,
            catalog: None,
            workdir: PathBuf::from("run"),
            task: MOR.to_string(),
            cohort_spec: CohortSpec::default(),
            experiment: ExperimentConfig::default(),
            mode: AblationMode::Full,
            sweep: SweepAxis::Alpha,
            seed: 0,
        }
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `custom` keeps the task named in the config file.
    pub task: Option<String>,
    pub mode: Option<AblationMode>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub sweep: Option<SweepAxis>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(path.display().to_string(), e.to_string()))
    }

    /// Applies overrides and propagates task and seed; validates the result.
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        if let Some(w) = &o.workdir {
            self.workdir = w.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        match o.task.as_deref() {
            None | Some("custom") => {}
            Some(t @ (MOR | RA | LOS)) => self.task = t.to_string(),
            Some(other) => return Err(CliError::config("task", format!("unknown task `{other}`"))),
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(s) = o.sweep {
            self.sweep = s;
        }
        if let Some(a) = o.alpha {
            self.experiment.alpha = Some(a);
        }
        if let Some(l) = o.lambda {
            self.experiment.alignment.lambda_mix = l;
        }
        if self.task.is_empty() {
            return Err(CliError::config("task", "must not be empty"));
        }
        if self.cohort.is_some() != self.catalog.is_some() {
            return Err(CliError::config("cohort", "cohort and catalog must be given together"));
        }
        self.cohort_spec.seed = self.seed;
        self.experiment = self.experiment.with_seed(self.seed);
        self.experiment.task_id = self.task.clone();
        self.experiment.validate()?;
        self.cohort_spec.validate()?;
        Ok(self)
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.cohort.clone().unwrap_or_else(|| self.workdir.join("cohort.jsonl"))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.catalog.clone().unwrap_or_else(|| self.workdir.join("catalog.json"))
    }

    /// Directory of the mode-specific stages.
    pub fn mode_dir(&self) -> PathBuf {
        self.workdir.join("modes").join(self.mode.name())
    }
}
