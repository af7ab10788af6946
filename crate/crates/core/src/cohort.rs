//! JSONL cohort files: one patient per line with its labels and, for
//! synthetic cohorts, the latent attributes the structural labelers use.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::ehr::{FeatureCatalog, PatientEhr};
use crate::error::{Error, Result};

/// Latent attributes of a synthetic patient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    /// Additive noise of the planted mortality logit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mor_noise: Option<f64>,
    /// Uniform draw deciding the Bernoulli mortality outcome.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mor_draw: Option<f64>,
    /// Days from the last discharge to the next admission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_days: Option<f64>,
    /// Length of the first stay in days.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stay_days: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    #[serde(flatten)]
    pub ehr: PatientEhr,
    pub labels: BTreeMap<String, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Latent>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub records: Vec<CohortRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&CohortRecord> {
        self.records.iter().find(|r| r.ehr.patient_id == patient_id)
    }

    pub fn index(&self) -> BTreeMap<&str, &CohortRecord> {
        self.records.iter().map(|r| (r.ehr.patient_id.as_str(), r)).collect()
    }

    /// The label of every patient for `task`, or a schema error naming the
    /// first patient without one.
    pub fn labels(&self, task: &str) -> Result<Vec<u8>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.labels.get(task).copied().ok_or_else(|| Error::Schema {
                    line: i + 1,
                    path: format!("labels.{task}"),
                })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a cohort. With `required_tasks`, every record must carry a
    /// label for each of them.
    pub fn load(path: impl AsRef<Path>, required_tasks: &[&str]) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(&line, i + 1, required_tasks)?);
        }
        Ok(Cohort { records })
    }
}

pub fn parse_record(line: &str, line_no: usize, required_tasks: &[&str]) -> Result<CohortRecord> {
    let raw: Json = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let schema = |path: &str| Error::Schema {
        line: line_no,
        path: path.to_string(),
    };
    let obj = raw.as_object().ok_or_else(|| schema("$"))?;
    for key in ["patient_id", "demographics", "visits", "labels"] {
        if !obj.contains_key(key) {
            return Err(schema(key));
        }
    }
    let labels = obj["labels"].as_object().ok_or_else(|| schema("labels"))?;
    for task in required_tasks {
        match labels.get(*task).and_then(Json::as_u64) {
            Some(0 | 1) => {}
            _ => return Err(schema(&format!("labels.{task}"))),
        }
    }
    for (k, v) in labels {
        if !matches!(v.as_u64(), Some(0 | 1)) {
            return Err(schema(&format!("labels.{k}")));
        }
    }
    let demos = obj["demographics"].as_array().ok_or_else(|| schema("demographics"))?;
    for (i, t) in demos.iter().enumerate() {
        check_tuple(t).map_err(|_| schema(&format!("demographics[{i}]")))?;
    }
    let visits = obj["visits"].as_array().ok_or_else(|| schema("visits"))?;
    for (v, visit) in visits.iter().enumerate() {
        let tuples = visit.as_array().ok_or_else(|| schema(&format!("visits[{v}]")))?;
        for (i, t) in tuples.iter().enumerate() {
            check_tuple(t).map_err(|_| schema(&format!("visits[{v}][{i}]")))?;
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

fn check_tuple(t: &Json) -> std::result::Result<(), ()> {
    match t.as_array().map(Vec::as_slice) {
        Some([Json::String(_), Json::Number(_) | Json::String(_) | Json::Null, ts]) if ts.as_u64().is_some() => Ok(()),
        _ => Err(()),
    }
}

/// Cohort plus catalog, the unit most stages read.
pub fn load_with_catalog(cohort: impl AsRef<Path>, catalog: impl AsRef<Path>, required_tasks: &[&str]) -> Result<(Cohort, FeatureCatalog)> {
    Ok((Cohort::load(cohort, required_tasks)?, FeatureCatalog::load(catalog)?))
}
