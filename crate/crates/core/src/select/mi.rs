//! Plug-in mutual information over discretised per-feature aggregates.

use std::collections::{BTreeMap, HashMap};

use super::encoding::Aggregate;

/// Code reserved for patients lacking the feature.
pub const ABSENT: u32 = 0;

/// Maps a column to integer codes: absent → 0, numeric values → 1 + an
/// equal-frequency bin, categorical values → 1 + the category's sorted position.
pub fn discretize(column: &[Aggregate], bins: usize) -> Vec<u32> {
    let mut numeric: Vec<f64> = column
        .iter()
        .filter_map(|a| match a {
            Aggregate::Numeric(v) => Some(*v),
            _ => None,
        })
        .collect();
    numeric.sort_by(f64::total_cmp);
    let n_num = numeric.len();

    let mut categories: Vec<&str> = column
        .iter()
        .filter_map(|a| match a {
            Aggregate::Categorical(s) => Some(s.as_str()),
            _ => None,
        })
        .collect();
    categories.sort_unstable();
    categories.dedup();
    let cat_offset = bins as u32 + 1;

    column
        .iter()
        .map(|a| match a {
            Aggregate::Absent => ABSENT,
            Aggregate::Numeric(v) => {
                // tied values share the bin of their first occurrence
                let below = numeric.partition_point(|x| x < v);
                1 + (below * bins / n_num) as u32
            }
            Aggregate::Categorical(s) => {
                cat_offset + categories.binary_search(&s.as_str()).expect("collected above") as u32
            }
        })
        .collect()
}

/// Plug-in estimate of I(A; B) in nats from paired codes.
pub fn mutual_information(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples");
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    let mut ma: BTreeMap<u32, usize> = BTreeMap::new();
    let mut mb: BTreeMap<u32, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ma.entry(x).or_insert(0) += 1;
        *mb.entry(y).or_insert(0) += 1;
    }
    let nf = n as f64;
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .into_iter()
        .map(|((x, y), c)| {
            let c = c as f64;
            c / nf * (c * nf / (ma[&x] as f64 * mb[&y] as f64)).ln()
        })
        .sum();
    mi.max(0.0)
}

pub fn label_codes(labels: &[u8]) -> Vec<u32> {
    labels.iter().map(|&y| y as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entropy(codes: &[u32]) -> f64 {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for c in codes {
            *counts.entry(*c).or_insert(0.0) += 1.0;
        }
        let n = codes.len() as f64;
        -counts.values().map(|c| c / n * (c / n).ln()).sum::<f64>()
    }

    fn num(vs: &[f64]) -> Vec<Aggregate> {
        vs.iter().map(|v| Aggregate::Numeric(*v)).collect()
    }

    #[test]
    fn perfect_predictor_has_ln2() {
        let codes = discretize(&num(&[0.0, 0.0, 1.0, 1.0]), 10);
        let mi = mutual_information(&codes, &[0, 0, 1, 1]);
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn independent_and_constant_features_are_zero() {
        let codes = discretize(&num(&[0.0, 1.0, 0.0, 1.0]), 10);
        assert_eq!(mutual_information(&codes, &[0, 0, 1, 1]), 0.0);
        let codes = discretize(&num(&[3.0; 4]), 10);
        assert_eq!(mutual_information(&codes, &[0, 0, 1, 1]), 0.0);
    }

    #[test]
    fn equal_frequency_bins() {
        let codes = discretize(&num(&[5.0, 1.0, 2.0, 3.0, 4.0, 6.0, 7.0, 8.0]), 4);
        assert_eq!(codes, vec![3, 1, 1, 2, 2, 3, 4, 4]);
        let mixed = vec![Aggregate::Absent, Aggregate::Numeric(1.0), Aggregate::Absent];
        assert_eq!(discretize(&mixed, 10), vec![ABSENT, 1, ABSENT]);
    }

    proptest! {
        #[test]
        fn matches_entropy_identity(pairs in prop::collection::vec((0u32..5, 0u32..3), 1..200)) {
            let (a, b): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let joint: Vec<u32> = a.iter().zip(&b).map(|(x, y)| x * 16 + y).collect();
            let oracle = (entropy(&a) + entropy(&b) - entropy(&joint)).max(0.0);
            let mi = mutual_information(&a, &b);
            prop_assert!((mi - oracle).abs() < 1e-9);
            prop_assert!((mi - mutual_information(&b, &a)).abs() < 1e-12);
            prop_assert!((mutual_information(&a, &a) - entropy(&a)).abs() < 1e-9);
        }
    }
}
