use super::encoding::{Aggregate, FeatureMatrix};
use crate::ehr::FeatureId;
use crate::predictor::linear::{DenseLogistic, DenseLogisticConfig};

/// Outcome of recursive feature elimination.
#[derive(Clone, Debug, PartialEq)]
pub struct RfeRanking {
    /// Most important first (reverse elimination order).
    pub ranking: Vec<FeatureId>,
    /// Set when every column is constant; the ranking is then lexical.
    pub degenerate_features: bool,
}

/// One standardised column per feature: numeric → last value with absent imputed
/// by the mean; categorical → indicator of the column's most common category.
fn standardized_columns(matrix: &FeatureMatrix) -> Vec<Vec<f64>> {
    matrix
        .columns
        .iter()
        .map(|col| {
            let raw: Vec<f64> = if col.iter().any(|a| matches!(a, Aggregate::Numeric(_))) {
                let present: Vec<f64> = col
                    .iter()
                    .filter_map(|a| match a {
                        Aggregate::Numeric(v) => Some(*v),
                        _ => None,
                    })
                    .collect();
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                col.iter()
                    .map(|a| match a {
                        Aggregate::Numeric(v) => *v,
                        _ => mean,
                    })
                    .collect()
            } else {
                let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
                for a in col {
                    if let Aggregate::Categorical(s) = a {
                        *counts.entry(s).or_insert(0) += 1;
                    }
                }
                let top = counts
                    .iter()
                    .fold(None::<(&str, usize)>, |best, (c, n)| match best {
                        Some((_, bn)) if bn >= *n => best,
                        _ => Some((c, *n)),
                    })
                    .map(|(c, _)| c);
                col.iter()
                    .map(|a| match (a, top) {
                        (Aggregate::Categorical(s), Some(t)) if s == t => 1.0,
                        _ => 0.0,
                    })
                    .collect()
            };
            let n = raw.len() as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let sd = (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd < 1e-12 {
                vec![0.0; raw.len()]
            } else {
                raw.iter().map(|x| (x - mean) / sd).collect()
            }
        })
        .collect()
}

pub(crate) fn rank(matrix: &FeatureMatrix, step_fraction: f64) -> RfeRanking {
    let columns = standardized_columns(matrix);
    let n_features = columns.len();
    let degenerate = columns.iter().all(|c| c.iter().all(|x| *x == 0.0));
    if degenerate {
        log::warn!("recursive feature elimination: all {n_features} features are constant; ranking lexically");
        return RfeRanking {
            ranking: matrix.features.clone(),
            degenerate_features: true,
        };
    }

    let config = DenseLogisticConfig::default();
    let mut remaining: Vec<usize> = (0..n_features).collect();
    let mut eliminated: Vec<usize> = Vec::with_capacity(n_features);
    while remaining.len() > 1 {
        let rows: Vec<Vec<f64>> = (0..matrix.n_rows())
            .map(|r| remaining.iter().map(|&f| columns[f][r]).collect())
            .collect();
        let model = DenseLogistic::fit(&rows, &matrix.labels, &config);
        let mut by_weight: Vec<(f64, usize)> = remaining
            .iter()
            .zip(&model.coef)
            .map(|(&f, w)| (w.abs(), f))
            .collect();
        by_weight.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let drop = ((step_fraction * remaining.len() as f64).ceil() as usize).clamp(1, remaining.len() - 1);
        for &(_, f) in by_weight.iter().take(drop) {
            eliminated.push(f);
        }
        remaining.retain(|f| !eliminated.contains(f));
    }
    eliminated.extend(remaining);
    RfeRanking {
        ranking: eliminated.into_iter().rev().map(|i| matrix.features[i].clone()).collect(),
        degenerate_features: false,
    }
}
