use super::encoding::FeatureMatrix;
use super::mi::{discretize, label_codes, mutual_information};
use crate::ehr::FeatureId;

/// Greedy minimum-redundancy maximum-relevance ranking, difference (MID) form:
/// each pick maximises `I(f; y) - mean_{g in selected} I(f; g)`. Exact ties go
/// to the lexically smaller feature id (columns are already sorted by id).
pub(crate) fn rank(matrix: &FeatureMatrix, bins: usize) -> Vec<FeatureId> {
    let codes: Vec<Vec<u32>> = matrix.columns.iter().map(|c| discretize(c, bins)).collect();
    let y = label_codes(&matrix.labels);
    let relevance: Vec<f64> = codes.iter().map(|c| mutual_information(c, &y)).collect();

    let n = codes.len();
    let mut redundancy_sum = vec![0.0; n];
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for step in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for f in (0..n).filter(|&f| !chosen[f]) {
            let score = if step == 0 {
                relevance[f]
            } else {
                relevance[f] - redundancy_sum[f] / step as f64
            };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((f, score));
            }
        }
        let (pick, _) = best.expect("unchosen feature remains");
        chosen[pick] = true;
        order.push(pick);
        for f in (0..n).filter(|&f| !chosen[f]) {
            redundancy_sum[f] += mutual_information(&codes[f], &codes[pick]);
        }
    }
    order.into_iter().map(|i| matrix.features[i].clone()).collect()
}
