//! Small numerically stable helpers shared by the predictor, the rewriter policy
//! and the alignment losses.

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `xs / temperature`.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax of `xs / temperature`.
pub fn log_softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|x| x - lse).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (ddof = 0).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Value at 1-based descending rank `ceil(fraction * n)` (at least rank 1).
///
/// Keeping every value `>=` the result retains the top `fraction` of the
/// values plus anything tied with the boundary value.
pub fn top_fraction_threshold(values: &[f64], fraction: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // guard against 0.3 * 10 = 3.0000000000000004
    let rank = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Some(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0], 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[3.2], 0.01), vec![1.0]);
    }

    #[test]
    fn top_fraction_threshold_matches_hand_counts() {
        let s: Vec<f64> = (1..=8).map(|v| v as f64 / 10.0).collect();
        assert_eq!(top_fraction_threshold(&s, 0.25), Some(0.7));
        assert_eq!(top_fraction_threshold(&s, 1.0), Some(0.1));
        assert_eq!(top_fraction_threshold(&s, 0.01), Some(0.8));
        let t: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(top_fraction_threshold(&t, 0.3), Some(8.0));
        assert_eq!(top_fraction_threshold(&[], 0.3), None);
    }
}
