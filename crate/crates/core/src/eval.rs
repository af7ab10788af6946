//! Interpolated ensemble inference and the evaluation harness.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ehr::{verbalize, FeatureCatalog, PatientEhr};
use crate::error::{Error, Result};
use crate::math::{mean, softmax, std_dev};
use crate::predictor::PredictorModel;
use crate::rewriter::{sample_rewrites, RewriterPolicy};
use crate::seed;

/// The alpha grid used for validation selection and sweeps.
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_BUCKET_EDGES: (usize, usize) = (2048, 4096);
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub n_rewrites: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 0.5,
            n_rewrites: 4,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if self.n_rewrites == 0 {
            return Err(Error::config("n_rewrites", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn interpolate(p_rewrite: f64, p_original: f64, alpha: f64) -> f64 {
    alpha * p_rewrite + (1.0 - alpha) * p_original
}

pub fn interpolated_proba(predictor: &PredictorModel, original_text: &str, rewrite_text: &str, alpha: f64) -> f64 {
    interpolate(predictor.predict_proba(rewrite_text), predictor.predict_proba(original_text), alpha)
}

/// `alpha * sum_j delta_j p_j + (1 - alpha) * p_original` with
/// `delta = softmax(logprobs)`. Written so that `alpha = 0` returns
/// `p_original` exactly and a single candidate reduces to [`interpolate`].
pub fn ensemble_from_parts(p_original: f64, p_rewrites: &[f64], delta: &[f64], alpha: f64) -> f64 {
    let mixed: f64 = delta.iter().zip(p_rewrites).map(|(d, p)| d * p).sum();
    interpolate(mixed, p_original, alpha).clamp(0.0, 1.0)
}

/// Per-patient ensemble prediction: `n_rewrites` policy samples weighted by
/// the softmax of their log-probabilities.
pub fn ensemble_predict(
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    ehr: &PatientEhr,
    catalog: &FeatureCatalog,
    config: &InferenceConfig,
) -> Result<f64> {
    let p_original = predictor.predict_proba(&verbalize(ehr, catalog)?.text);
    let parts = ensemble_parts(predictor, policy, ehr, catalog, config)?;
    Ok(ensemble_from_parts(p_original, &parts.0, &parts.1, config.alpha))
}

/// Rewrite probabilities and ensemble weights for one patient.
pub fn ensemble_parts(
    predictor: &PredictorModel,
    policy: &RewriterPolicy,
    ehr: &PatientEhr,
    catalog: &FeatureCatalog,
    config: &InferenceConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rewrites = sample_rewrites(policy, ehr, catalog, config.n_rewrites, config.seed)?;
    let mut probs = Vec::with_capacity(rewrites.len());
    let mut logprobs = Vec::with_capacity(rewrites.len());
    for rw in &rewrites {
        let text = verbalize(&rw.materialize(ehr)?, catalog)?.text;
        probs.push(predictor.predict_proba(&text));
        logprobs.push(rw.logprob.unwrap_or(0.0));
    }
    Ok((probs, softmax(&logprobs, 1.0)))
}

/// Cached per-patient inference inputs, so an alpha sweep needs one pass.
#[derive(Clone, Debug)]
pub struct EnsembleCache {
    pub p_original: Vec<f64>,
    pub p_rewrites: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl EnsembleCache {
    pub fn build(
        predictor: &PredictorModel,
        policy: &RewriterPolicy,
        ehrs: &[&PatientEhr],
        catalog: &FeatureCatalog,
        config: &InferenceConfig,
    ) -> Result<Self> {
        let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = ehrs
            .par_iter()
            .map(|e| {
                let p0 = predictor.predict_proba(&verbalize(e, catalog)?.text);
                let (p, d) = ensemble_parts(predictor, policy, e, catalog, config)?;
                Ok((p0, p, d))
            })
            .collect::<Result<_>>()?;
        let mut cache = EnsembleCache {
            p_original: Vec::with_capacity(rows.len()),
            p_rewrites: Vec::with_capacity(rows.len()),
            delta: Vec::with_capacity(rows.len()),
        };
        for (p0, p, d) in rows {
            cache.p_original.push(p0);
            cache.p_rewrites.push(p);
            cache.delta.push(d);
        }
        Ok(cache)
    }

    pub fn scores(&self, alpha: f64) -> Vec<f64> {
        (0..self.p_original.len())
            .map(|i| ensemble_from_parts(self.p_original[i], &self.p_rewrites[i], &self.delta[i], alpha))
            .collect()
    }
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by descending score; ties keep index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve via midranks: P(pos > neg) + 0.5 P(tie).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::config("scores", "length differs from labels"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!("{pos} positives, {neg} negatives")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of (#negatives below + 0.5 #negatives tied).
    let mut credit = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (p, n) = class_counts(&idx[i..j].iter().map(|&k| labels[k]).collect::<Vec<_>>());
        credit += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(credit / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve: sum of recall increments times
/// precision, one step per distinct score threshold.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::config("scores", "length differs from labels"));
    }
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::DegenerateLabels("no positives".into()));
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            group_pos += labels[idx[j]] as usize;
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        if group_pos > 0 {
            area += (group_pos as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub count: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// Set when the bucket lacks one class and metrics are undefined.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Bootstrap mean.
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_std: f64,
    pub auprc_std: f64,
    /// Metrics on the full evaluation set, without resampling.
    pub auroc_point: f64,
    pub auprc_point: f64,
    pub n_bootstrap: usize,
    pub n_skipped: usize,
    pub n_evaluated: usize,
    pub strata: BTreeMap<String, StratumMetrics>,
}

pub const STRATA: [&str; 3] = ["short", "medium", "long"];

/// Bootstrap mean and population standard deviation of AUROC and AUPRC.
/// Resamples lacking a class are redrawn up to 100 times, then skipped.
pub fn bootstrap_metrics(scores: &[f64], labels: &[u8], n_iter: usize, seed_value: u64) -> Result<MetricReport> {
    let auroc_point = auroc(scores, labels)?;
    let auprc_point = auprc(scores, labels)?;
    let m = scores.len();
    let draws: Vec<Option<(f64, f64)>> = (0..n_iter)
        .into_par_iter()
        .map(|it| {
            let mut rng = seed::rng(seed::derive_index(seed_value, "bootstrap", it as u64));
            for _ in 0..=MAX_REDRAWS {
                let pick: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
                let s: Vec<f64> = pick.iter().map(|&i| scores[i]).collect();
                let y: Vec<u8> = pick.iter().map(|&i| labels[i]).collect();
                if let (Ok(a), Ok(p)) = (auroc(&s, &y), auprc(&s, &y)) {
                    return Some((a, p));
                }
            }
            None
        })
        .collect();
    let ok: Vec<(f64, f64)> = draws.iter().flatten().copied().collect();
    let a: Vec<f64> = ok.iter().map(|x| x.0).collect();
    let p: Vec<f64> = ok.iter().map(|x| x.1).collect();
    let (auroc_mean, auprc_mean) = if ok.is_empty() { (auroc_point, auprc_point) } else { (mean(&a), mean(&p)) };
    Ok(MetricReport {
        auroc: auroc_mean,
        auprc: auprc_mean,
        auroc_std: if ok.is_empty() { 0.0 } else { std_dev(&a) },
        auprc_std: if ok.is_empty() { 0.0 } else { std_dev(&p) },
        auroc_point,
        auprc_point,
        n_bootstrap: ok.len(),
        n_skipped: n_iter - ok.len(),
        n_evaluated: m,
        strata: BTreeMap::new(),
    })
}

/// Buckets `[0, e1)`, `[e1, e2]`, `(e2, inf)` by token length.
pub fn bucket_of(token_len: usize, edges: (usize, usize)) -> &'static str {
    if token_len < edges.0 {
        STRATA[0]
    } else if token_len <= edges.1 {
        STRATA[1]
    } else {
        STRATA[2]
    }
}

pub fn stratified_report(per_patient: &[(f64, u8, usize)], edges: (usize, usize)) -> Result<BTreeMap<String, StratumMetrics>> {
    if edges.0 >= edges.1 {
        return Err(Error::config("bucket_edges", "must be strictly increasing"));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = STRATA.iter().map(|s| (*s, Default::default())).collect();
    for &(score, label, len) in per_patient {
        let g = groups.get_mut(bucket_of(len, edges)).expect("all buckets present");
        g.0.push(score);
        g.1.push(label);
    }
    Ok(groups
        .into_iter()
        .map(|(name, (s, y))| {
            let (auroc, auprc) = match (auroc(&s, &y), auprc(&s, &y)) {
                (Ok(a), Ok(p)) => (Some(a), Some(p)),
                _ => (None, None),
            };
            let stratum = StratumMetrics {
                count: s.len(),
                positives: class_counts(&y).0,
                degenerate: auroc.is_none(),
                auroc,
                auprc,
            };
            (name.to_string(), stratum)
        })
        .collect())
}

/// Bootstrap report plus length strata for one evaluation run.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    token_lengths: &[usize],
    n_bootstrap: usize,
    seed_value: u64,
    edges: (usize, usize),
) -> Result<MetricReport> {
    let mut report = bootstrap_metrics(scores, labels, n_bootstrap, seed_value)?;
    let rows: Vec<(f64, u8, usize)> = scores
        .iter()
        .zip(labels)
        .zip(token_lengths)
        .map(|((&s, &y), &l)| (s, y, l))
        .collect();
    report.strata = stratified_report(&rows, edges)?;
    Ok(report)
}

/// Scales a metric to the percentage convention of the output tables.
pub fn pct(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["task", "mode", "alpha", "lambda", "auroc", "auroc_std", "auprc", "auprc_std"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for s in STRATA {
            h.extend([format!("{s}_count"), format!("{s}_auroc"), format!("{s}_auprc")]);
        }
        h
    }

    /// One flat row; metrics multiplied by 100.
    pub fn csv_row(&self, task: &str, mode: &str, alpha: f64, lambda: f64) -> Vec<String> {
        let mut r = vec![
            task.to_string(),
            mode.to_string(),
            format!("{alpha}"),
            format!("{lambda}"),
            pct(self.auroc),
            pct(self.auroc_std),
            pct(self.auprc),
            pct(self.auprc_std),
        ];
        for s in STRATA {
            match self.strata.get(s) {
                Some(m) => r.extend([m.count.to_string(), pct_opt(m.auroc), pct_opt(m.auprc)]),
                None => r.extend(["0".to_string(), String::new(), String::new()]),
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let y = [1, 0, 1, 0];
        assert_eq!(auroc(&s, &y).unwrap(), 0.75);
        assert!((auprc(&s, &y).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(auroc(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[1, 1, 1, 1]), Err(Error::DegenerateLabels(_))));
        assert!(matches!(auprc(&s, &[0; 4]), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn interpolation_boundaries() {
        assert!((interpolate(0.8, 0.4, 0.5) - 0.6).abs() < 1e-15);
        assert_eq!(interpolate(0.8, 0.4, 0.0), 0.4);
        assert_eq!(interpolate(0.8, 0.4, 1.0), 0.8);
        assert_eq!(ensemble_from_parts(0.3, &[0.9, 0.1], &[0.5, 0.5], 0.0), 0.3);
        assert_eq!(ensemble_from_parts(0.3, &[0.9], &softmax(&[-4.2], 1.0), 0.25), interpolate(0.9, 0.3, 0.25));
    }

    #[test]
    fn strata_buckets() {
        let rows = [(0.1, 0, 100), (0.2, 1, 3000), (0.3, 0, 9000)];
        let st = stratified_report(&rows, DEFAULT_BUCKET_EDGES).unwrap();
        assert!(STRATA.iter().all(|s| st[*s].count == 1 && st[*s].degenerate));
        assert_eq!(bucket_of(2048, DEFAULT_BUCKET_EDGES), "medium");
        assert_eq!(bucket_of(4096, DEFAULT_BUCKET_EDGES), "medium");
        assert_eq!(bucket_of(4097, DEFAULT_BUCKET_EDGES), "long");
    }

    #[test]
    fn single_pair_bootstrap_has_zero_std() {
        let r = bootstrap_metrics(&[0.9, 0.1], &[1, 0], 1, 4).unwrap();
        assert_eq!(r.n_bootstrap, 1);
        assert_eq!(r.auroc_std, 0.0);
        assert_eq!(r.auroc, 1.0);
    }

    #[test]
    fn csv_row_is_percent() {
        let r = bootstrap_metrics(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0], 10, 1).unwrap();
        let row = r.csv_row("mor", "full", 0.5, 0.25);
        assert_eq!(row.len(), MetricReport::csv_header().len());
        assert_eq!(&row[..4], &["mor", "full", "0.5", "0.25"]);
    }
}
