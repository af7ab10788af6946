//! Per-patient, per-feature aggregation used by the data-driven scorers: the
//! last recorded value for numeric features, the mode for categorical ones.

use std::collections::{BTreeMap, BTreeSet};

use crate::ehr::{FeatureCatalog, FeatureId, PatientEhr, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Aggregate {
    Numeric(f64),
    Categorical(String),
    Absent,
}

/// Column-major view of a labelled dataset, one column per feature present in it.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub features: Vec<FeatureId>,
    pub columns: Vec<Vec<Aggregate>>,
    pub labels: Vec<u8>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn column(&self, feature: &str) -> Option<&[Aggregate]> {
        self.features
            .iter()
            .position(|f| f == feature)
            .map(|i| self.columns[i].as_slice())
    }
}

pub fn aggregate_patient(ehr: &PatientEhr) -> BTreeMap<FeatureId, Aggregate> {
    // (timestamp, flat index) of the latest numeric value per feature
    let mut last: BTreeMap<&str, (u64, usize, f64)> = BTreeMap::new();
    let mut cats: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (i, t) in ehr.tuples().enumerate() {
        match &t.value {
            Value::Numeric(v) => {
                let e = last.entry(&t.feature).or_insert((t.timestamp, i, *v));
                if (t.timestamp, i) >= (e.0, e.1) {
                    *e = (t.timestamp, i, *v);
                }
            }
            Value::Categorical(s) => {
                *cats.entry(&t.feature).or_default().entry(s).or_insert(0) += 1;
            }
            Value::Missing => {}
        }
    }
    let mut out = BTreeMap::new();
    for (f, (_, _, v)) in last {
        out.insert(f.to_string(), Aggregate::Numeric(v));
    }
    for (f, counts) in cats {
        // max count, ties to the lexically smallest category
        let (cat, _) = counts
            .iter()
            .fold(None::<(&str, usize)>, |best, (c, n)| match best {
                Some((_, bn)) if bn >= *n => best,
                _ => Some((c, *n)),
            })
            .expect("non-empty counts");
        out.entry(f.to_string())
            .or_insert_with(|| Aggregate::Categorical(cat.to_string()));
    }
    out
}

pub fn build_matrix(dataset: &[(&PatientEhr, u8)], catalog: &FeatureCatalog) -> Result<FeatureMatrix> {
    let rows: Vec<BTreeMap<FeatureId, Aggregate>> = dataset.iter().map(|(e, _)| aggregate_patient(e)).collect();
    let mut features = BTreeSet::new();
    for row in &rows {
        for f in row.keys() {
            catalog.require(f)?;
            features.insert(f.clone());
        }
    }
    let features: Vec<FeatureId> = features.into_iter().collect();
    let columns = features
        .iter()
        .map(|f| rows.iter().map(|r| r.get(f).cloned().unwrap_or(Aggregate::Absent)).collect())
        .collect();
    Ok(FeatureMatrix {
        features,
        columns,
        labels: dataset.iter().map(|(_, y)| *y).collect(),
    })
}

pub fn require_both_labels(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positives among {} examples",
            labels.len()
        )));
    }
    Ok(())
}
