//! EHR data model: the feature catalog, timestamped feature-value tuples grouped
//! into visits, the markdown verbalizer, and the subset-based [`Rewrite`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::OperatorId;

pub type FeatureId = String;

/// Clinical modality of a feature. Declaration order is the section order used
/// by [`verbalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Demographic,
    Diagnosis,
    Lab,
    Medication,
    Procedure,
    Other,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Demographic,
        Modality::Diagnosis,
        Modality::Lab,
        Modality::Medication,
        Modality::Procedure,
        Modality::Other,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Modality::Demographic => "demographic",
            Modality::Diagnosis => "diagnosis",
            Modality::Lab => "lab",
            Modality::Medication => "medication",
            Modality::Procedure => "procedure",
            Modality::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub display_name: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_range: Option<(f64, f64)>,
    pub value_kind: ValueKind,
}

impl FeatureInfo {
    pub fn numeric(display_name: &str, modality: Modality, range: Option<(f64, f64)>) -> Self {
        FeatureInfo {
            display_name: display_name.to_string(),
            modality,
            reference_range: range,
            value_kind: ValueKind::Numeric,
        }
    }

    pub fn categorical(display_name: &str, modality: Modality) -> Self {
        FeatureInfo {
            display_name: display_name.to_string(),
            modality,
            reference_range: None,
            value_kind: ValueKind::Categorical,
        }
    }

    /// True when `value` is numeric and falls strictly outside the reference range.
    pub fn is_abnormal(&self, value: &Value) -> bool {
        match (self.reference_range, value) {
            (Some((lo, hi)), Value::Numeric(v)) => *v < lo || *v > hi,
            _ => false,
        }
    }
}

/// Reference set of features keyed by [`FeatureId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<FeatureId, FeatureInfo>", into = "BTreeMap<FeatureId, FeatureInfo>")]
pub struct FeatureCatalog {
    entries: BTreeMap<FeatureId, FeatureInfo>,
}

impl TryFrom<BTreeMap<FeatureId, FeatureInfo>> for FeatureCatalog {
    type Error = Error;

    fn try_from(entries: BTreeMap<FeatureId, FeatureInfo>) -> Result<Self> {
        FeatureCatalog::new(entries)
    }
}

impl From<FeatureCatalog> for BTreeMap<FeatureId, FeatureInfo> {
    fn from(c: FeatureCatalog) -> Self {
        c.entries
    }
}

impl FeatureCatalog {
    pub fn new(entries: BTreeMap<FeatureId, FeatureInfo>) -> Result<Self> {
        for (id, info) in &entries {
            if let Some((lo, hi)) = info.reference_range {
                if !(lo < hi) {
                    return Err(Error::InvalidCatalog {
                        feature: id.clone(),
                        reason: format!("reference range [{lo}, {hi}] is empty"),
                    });
                }
                if info.value_kind != ValueKind::Numeric {
                    return Err(Error::InvalidCatalog {
                        feature: id.clone(),
                        reason: "reference range on a categorical feature".into(),
                    });
                }
            }
        }
        Ok(FeatureCatalog { entries })
    }

    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (FeatureId, FeatureInfo)>,
    {
        Self::new(entries.into_iter().collect())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureInfo> {
        self.entries.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&FeatureInfo> {
        self.get(id).ok_or_else(|| Error::UnknownFeature(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureId, &FeatureInfo)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &FeatureId> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A recorded value. Serialized as a JSON number, string or `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Numeric(f64),
    Categorical(String),
    Missing,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Numeric(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Numeric(v) => f.write_str(&format_number(*v)),
            Value::Categorical(s) => f.write_str(s),
            Value::Missing => f.write_str("(missing)"),
        }
    }
}

/// Four decimal places, trailing zeros (and a dangling point) trimmed.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let mut s = format!("{v:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(FeatureId, Value, u64)", into = "(FeatureId, Value, u64)")]
pub struct FeatureValueTuple {
    pub feature: FeatureId,
    pub value: Value,
    pub timestamp: u64,
}

impl From<(FeatureId, Value, u64)> for FeatureValueTuple {
    fn from((feature, value, timestamp): (FeatureId, Value, u64)) -> Self {
        FeatureValueTuple {
            feature,
            value,
            timestamp,
        }
    }
}

impl From<FeatureValueTuple> for (FeatureId, Value, u64) {
    fn from(t: FeatureValueTuple) -> Self {
        (t.feature, t.value, t.timestamp)
    }
}

impl FeatureValueTuple {
    pub fn new(feature: &str, value: Value, timestamp: u64) -> Self {
        FeatureValueTuple {
            feature: feature.to_string(),
            value,
            timestamp,
        }
    }

    pub fn numeric(feature: &str, value: f64, timestamp: u64) -> Self {
        Self::new(feature, Value::Numeric(value), timestamp)
    }

    pub fn categorical(feature: &str, value: &str, timestamp: u64) -> Self {
        Self::new(feature, Value::Categorical(value.to_string()), timestamp)
    }
}

pub type Visit = Vec<FeatureValueTuple>;

/// One patient's record: timestamp-0 demographics followed by ordered visits.
///
/// Tuples are addressed by a flat index: demographics first, then each visit in
/// order. Rewrites and the rewriter policy use that index space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientEhr {
    pub patient_id: String,
    #[serde(default)]
    pub demographics: Vec<FeatureValueTuple>,
    #[serde(default)]
    pub visits: Vec<Visit>,
}

impl PatientEhr {
    pub fn new(patient_id: &str) -> Self {
        PatientEhr {
            patient_id: patient_id.to_string(),
            ..Default::default()
        }
    }

    pub fn tuples(&self) -> impl Iterator<Item = &FeatureValueTuple> + '_ {
        self.demographics.iter().chain(self.visits.iter().flatten())
    }

    pub fn num_tuples(&self) -> usize {
        self.demographics.len() + self.visits.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.num_tuples() == 0
    }

    pub fn max_timestamp(&self) -> u64 {
        self.tuples().map(|t| t.timestamp).max().unwrap_or(0)
    }

    /// Keeps the tuples whose flat index satisfies `keep`, preserving visit
    /// structure and dropping visits that become empty.
    pub fn filter_indexed(&self, mut keep: impl FnMut(usize, &FeatureValueTuple) -> bool) -> PatientEhr {
        let mut idx = 0;
        let mut demographics = Vec::new();
        for t in &self.demographics {
            if keep(idx, t) {
                demographics.push(t.clone());
            }
            idx += 1;
        }
        let mut visits = Vec::new();
        for visit in &self.visits {
            let mut kept = Vec::new();
            for t in visit {
                if keep(idx, t) {
                    kept.push(t.clone());
                }
                idx += 1;
            }
            if !kept.is_empty() {
                visits.push(kept);
            }
        }
        PatientEhr {
            patient_id: self.patient_id.clone(),
            demographics,
            visits,
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&FeatureValueTuple) -> bool) -> PatientEhr {
        self.filter_indexed(|_, t| keep(t))
    }
}

/// Text form of an EHR plus its whitespace token count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizedEhr {
    pub text: String,
    pub token_count: usize,
}

impl VerbalizedEhr {
    pub fn from_text(text: String) -> Self {
        let token_count = count_tokens(&text);
        VerbalizedEhr { text, token_count }
    }
}

fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn token_length(v: &VerbalizedEhr) -> usize {
    count_tokens(&v.text)
}

/// Renders an EHR as markdown: one `# {modality}` header per modality present,
/// followed by `- {display name}: {value}` lines in timestamp order.
pub fn verbalize(ehr: &PatientEhr, catalog: &FeatureCatalog) -> Result<VerbalizedEhr> {
    let mut sections: [Vec<&FeatureValueTuple>; 6] = Default::default();
    for t in ehr.tuples() {
        let info = catalog.require(&t.feature)?;
        sections[info.modality.index()].push(t);
    }
    let mut lines = Vec::new();
    for modality in Modality::ALL {
        let section = &mut sections[modality.index()];
        if section.is_empty() {
            continue;
        }
        // stable: equal timestamps keep input order
        section.sort_by_key(|t| t.timestamp);
        lines.push(format!("# {}", modality.display_name()));
        for t in section.iter() {
            let info = catalog.require(&t.feature)?;
            lines.push(format!("- {}: {}", info.display_name, t.value));
        }
    }
    Ok(VerbalizedEhr::from_text(lines.join("\n")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    UnknownFeature { tuple_index: usize, feature: FeatureId },
    ValueKind { tuple_index: usize, feature: FeatureId },
    DemographicTimestamp { tuple_index: usize },
    TimestampOrder { tuple_index: usize, visit: usize },
    VisitOrder { visit: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_ehr(ehr: &PatientEhr, catalog: &FeatureCatalog) -> ValidationReport {
    let mut violations = Vec::new();
    let check_tuple = |idx: usize, t: &FeatureValueTuple, violations: &mut Vec<Violation>| {
        match catalog.get(&t.feature) {
            None => violations.push(Violation::UnknownFeature {
                tuple_index: idx,
                feature: t.feature.clone(),
            }),
            Some(info) => {
                let ok = matches!(
                    (&t.value, info.value_kind),
                    (Value::Missing, _) | (Value::Numeric(_), ValueKind::Numeric) | (Value::Categorical(_), ValueKind::Categorical)
                );
                if !ok {
                    violations.push(Violation::ValueKind {
                        tuple_index: idx,
                        feature: t.feature.clone(),
                    });
                }
            }
        }
    };

    let mut idx = 0;
    for t in &ehr.demographics {
        check_tuple(idx, t, &mut violations);
        if t.timestamp != 0 {
            violations.push(Violation::DemographicTimestamp { tuple_index: idx });
        }
        idx += 1;
    }
    let mut prev_first: Option<u64> = None;
    for (v, visit) in ehr.visits.iter().enumerate() {
        if let Some(first) = visit.first().map(|t| t.timestamp) {
            if prev_first.is_some_and(|p| first < p) {
                violations.push(Violation::VisitOrder { visit: v });
            }
            prev_first = Some(first);
        }
        let mut prev_t = None;
        for t in visit {
            check_tuple(idx, t, &mut violations);
            if prev_t.is_some_and(|p| t.timestamp < p) {
                violations.push(Violation::TimestampOrder {
                    tuple_index: idx,
                    visit: v,
                });
            }
            prev_t = Some(t.timestamp);
            idx += 1;
        }
    }
    ValidationReport { violations }
}

/// Where a rewrite came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteSource {
    Operator(OperatorId),
    Policy,
    External,
}

impl fmt::Display for RewriteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteSource::Operator(op) => write!(f, "{op}"),
            RewriteSource::Policy => f.write_str("POLICY"),
            RewriteSource::External => f.write_str("EXTERNAL"),
        }
    }
}

/// A derived EHR expressed as the sorted flat indices of the source tuples it
/// keeps, so it is a subset of its source by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rewrite {
    pub kept: Vec<usize>,
    pub source: RewriteSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

impl Rewrite {
    pub fn new(mut kept: Vec<usize>, source: RewriteSource) -> Self {
        kept.sort_unstable();
        kept.dedup();
        Rewrite {
            kept,
            source,
            logprob: None,
        }
    }

    pub fn with_logprob(mut self, logprob: f64) -> Self {
        self.logprob = Some(logprob);
        self
    }

    /// Inclusion mask over the source's flat tuple indices.
    pub fn mask(&self, ehr: &PatientEhr) -> Result<Vec<bool>> {
        let n = ehr.num_tuples();
        let mut mask = vec![false; n];
        for &i in &self.kept {
            if i >= n {
                return Err(Error::NotASubset(format!(
                    "index {i} out of range for {} tuples of `{}`",
                    n, ehr.patient_id
                )));
            }
            mask[i] = true;
        }
        Ok(mask)
    }

    pub fn materialize(&self, ehr: &PatientEhr) -> Result<PatientEhr> {
        let mask = self.mask(ehr)?;
        Ok(ehr.filter_indexed(|i, _| mask[i]))
    }

    /// Recovers a rewrite from an explicit derived EHR, matching tuples as a
    /// multiset against the source.
    pub fn from_subset(original: &PatientEhr, derived: &PatientEhr, source: RewriteSource) -> Result<Self> {
        let pool: Vec<&FeatureValueTuple> = original.tuples().collect();
        let mut used = vec![false; pool.len()];
        let mut kept = Vec::with_capacity(derived.num_tuples());
        for t in derived.tuples() {
            let hit = pool
                .iter()
                .enumerate()
                .find(|(i, p)| !used[*i] && **p == t)
                .map(|(i, _)| i);
            match hit {
                Some(i) => {
                    used[i] = true;
                    kept.push(i);
                }
                None => {
                    return Err(Error::NotASubset(format!(
                        "tuple ({}, {}, t={}) not in `{}`",
                        t.feature, t.value, t.timestamp, original.patient_id
                    )))
                }
            }
        }
        Ok(Rewrite::new(kept, source))
    }
}

/// Multiset inclusion of `derived`'s tuples in `original`'s tuples.
pub fn is_subset(original: &PatientEhr, derived: &PatientEhr) -> bool {
    Rewrite::from_subset(original, derived, RewriteSource::External).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn catalog() -> FeatureCatalog {
        FeatureCatalog::from_entries([
            ("age".to_string(), FeatureInfo::numeric("age", Modality::Demographic, None)),
            (
                "potassium".to_string(),
                FeatureInfo::numeric("potassium", Modality::Lab, Some((3.5, 5.0))),
            ),
            ("sodium".to_string(), FeatureInfo::numeric("sodium", Modality::Lab, Some((135.0, 145.0)))),
            ("sepsis".to_string(), FeatureInfo::categorical("sepsis", Modality::Diagnosis)),
        ])
        .unwrap()
    }

    #[test]
    fn verbalizes_single_lab() {
        let mut ehr = PatientEhr::new("p");
        ehr.visits.push(vec![FeatureValueTuple::numeric("potassium", 4.1, 1)]);
        let v = verbalize(&ehr, &catalog()).unwrap();
        assert_eq!(v.text, "# lab\n- potassium: 4.1");
        assert_eq!(v.token_count, 5);
    }

    #[test]
    fn empty_ehr_is_empty_text() {
        let v = verbalize(&PatientEhr::new("p"), &catalog()).unwrap();
        assert_eq!(v.text, "");
        assert_eq!(v.token_count, 0);
    }

    #[test]
    fn sections_follow_modality_order() {
        let mut ehr = PatientEhr::new("p");
        ehr.visits.push(vec![
            FeatureValueTuple::numeric("potassium", 4.0, 1),
            FeatureValueTuple::categorical("sepsis", "yes", 2),
        ]);
        ehr.demographics.push(FeatureValueTuple::numeric("age", 71.0, 0));
        let v = verbalize(&ehr, &catalog()).unwrap();
        assert_eq!(
            v.text,
            "# demographic\n- age: 71\n# diagnosis\n- sepsis: yes\n# lab\n- potassium: 4"
        );
    }

    #[test]
    fn unknown_feature_is_an_error() {
        let mut ehr = PatientEhr::new("p");
        ehr.visits.push(vec![FeatureValueTuple::numeric("lactate", 2.0, 1)]);
        assert!(matches!(verbalize(&ehr, &catalog()), Err(Error::UnknownFeature(f)) if f == "lactate"));
    }

    #[test]
    fn missing_values_render_placeholder() {
        let mut ehr = PatientEhr::new("p");
        ehr.visits.push(vec![FeatureValueTuple::new("sodium", Value::Missing, 3)]);
        assert_eq!(verbalize(&ehr, &catalog()).unwrap().text, "# lab\n- sodium: (missing)");
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(4.1), "4.1");
        assert_eq!(format_number(6.0), "6");
        assert_eq!(format_number(1.23456789), "1.2346");
        assert_eq!(format_number(-0.00001), "0");
        assert_eq!(format_number(140.25), "140.25");
    }

    #[test]
    fn token_length_examples() {
        assert_eq!(token_length(&VerbalizedEhr::from_text(String::new())), 0);
        assert_eq!(token_length(&VerbalizedEhr::from_text("- potassium: 4.1".into())), 3);
    }

    #[test]
    fn validation_reports_each_violation() {
        let cat = catalog();
        let mut ok = PatientEhr::new("p");
        ok.visits.push(vec![
            FeatureValueTuple::numeric("potassium", 4.0, 1),
            FeatureValueTuple::numeric("sodium", 140.0, 2),
        ]);
        assert!(validate_ehr(&ok, &cat).is_valid());

        let mut unknown = ok.clone();
        unknown.visits[0].push(FeatureValueTuple::numeric("lactate", 1.0, 3));
        let r = validate_ehr(&unknown, &cat);
        assert_eq!(
            r.violations,
            vec![Violation::UnknownFeature {
                tuple_index: 2,
                feature: "lactate".into()
            }]
        );

        let mut order = ok.clone();
        order.visits[0][1].timestamp = 0;
        let r = validate_ehr(&order, &cat);
        assert_eq!(r.violations, vec![Violation::TimestampOrder { tuple_index: 1, visit: 0 }]);
    }

    #[test]
    fn catalog_rejects_bad_ranges() {
        let bad = FeatureCatalog::from_entries([(
            "k".to_string(),
            FeatureInfo::numeric("k", Modality::Lab, Some((5.0, 5.0))),
        )]);
        assert!(bad.is_err());
        let mut cat_range = FeatureInfo::categorical("c", Modality::Diagnosis);
        cat_range.reference_range = Some((0.0, 1.0));
        assert!(FeatureCatalog::from_entries([("c".to_string(), cat_range)]).is_err());
    }

    #[test]
    fn catalog_json_round_trip() {
        let cat = catalog();
        let json = serde_json::to_string(&cat).unwrap();
        assert!(json.contains("\"reference_range\":[3.5,5.0]"));
        let back: FeatureCatalog = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cat);
    }

    #[test]
    fn rewrite_subset_round_trip() {
        let mut ehr = PatientEhr::new("p");
        ehr.demographics.push(FeatureValueTuple::numeric("age", 70.0, 0));
        ehr.visits.push(vec![
            FeatureValueTuple::numeric("potassium", 4.0, 1),
            FeatureValueTuple::numeric("potassium", 4.0, 1),
        ]);
        ehr.visits.push(vec![FeatureValueTuple::numeric("sodium", 150.0, 9)]);
        let rw = Rewrite::new(vec![3, 1], RewriteSource::Policy);
        let derived = rw.materialize(&ehr).unwrap();
        assert_eq!(derived.visits.len(), 2);
        assert!(is_subset(&ehr, &derived));
        let back = Rewrite::from_subset(&ehr, &derived, RewriteSource::Policy).unwrap();
        assert_eq!(back.kept, vec![1, 3]);

        let mut foreign = derived.clone();
        foreign.visits[0].push(FeatureValueTuple::numeric("potassium", 9.9, 1));
        assert!(!is_subset(&ehr, &foreign));
        // multiplicity matters
        let mut doubled = ehr.clone();
        doubled.visits[1].push(FeatureValueTuple::numeric("sodium", 150.0, 9));
        assert!(!is_subset(&ehr, &doubled));
        assert!(Rewrite::new(vec![7], RewriteSource::Policy).mask(&ehr).is_err());
    }
}
