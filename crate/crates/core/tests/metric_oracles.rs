use std::collections::BTreeMap;

use ehr_rewrite::eval::{auprc, auroc, bootstrap_metrics};
use ehr_rewrite::select::mi::mutual_information;
use ehr_rewrite::select::{mrmr_rank, mutual_information_scores, OperatorConfig};
use ehr_rewrite::{FeatureCatalog, FeatureInfo, FeatureValueTuple, Modality, PatientEhr};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    credit += 1.0;
                } else if si == sj {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

fn enumerated_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / pos;
        let precision = tp / predicted.len() as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let m = rng.random_range(2..=200);
        // coarse scores force plenty of ties
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let rate = rng.random_range(0.05..0.95);
        let labels: Vec<u8> = (0..m).map(|_| rng.random_bool(rate) as u8).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

#[test]
fn auroc_and_auprc_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (s, y) = random_instance(&mut rng);
        assert!((auroc(&s, &y).unwrap() - pairwise_auroc(&s, &y)).abs() <= 1e-12);
        assert!((auprc(&s, &y).unwrap() - enumerated_auprc(&s, &y)).abs() <= 1e-12);
    }
}

#[test]
fn metric_worked_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .map(|c| c as f64 / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn entropy_mi(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    let mut cab = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
        *cab.entry((x, y)).or_insert(0) += 1;
    }
    entropy(ca.into_values(), n) + entropy(cb.into_values(), n) - entropy(cab.into_values(), n)
}

#[test]
fn mi_matches_entropy_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let ka = rng.random_range(1..8);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = a
            .iter()
            .map(|&x| if rng.random_bool(0.6) { x % 3 } else { rng.random_range(0..4) })
            .collect();
        let oracle = entropy_mi(&a, &b).max(0.0);
        assert!((mutual_information(&a, &b) - oracle).abs() <= 1e-9);
    }
}

fn random_table(rng: &mut ChaCha8Rng) -> (Vec<PatientEhr>, Vec<u8>, FeatureCatalog) {
    let n_features = rng.random_range(2..8);
    let n = rng.random_range(20..120);
    let mut entries = BTreeMap::new();
    for f in 0..n_features {
        let id = format!("f{f}");
        if f % 2 == 0 {
            entries.insert(id.clone(), FeatureInfo::numeric(&id, Modality::Lab, None));
        } else {
            entries.insert(id.clone(), FeatureInfo::categorical(&id, Modality::Diagnosis));
        }
    }
    let catalog = FeatureCatalog::new(entries).unwrap();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    let ehrs = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut e = PatientEhr::new(&format!("p{i}"));
            let present: Vec<usize> = (0..n_features).filter(|_| rng.random_bool(0.8)).collect();
            let visit = present
                .into_iter()
                .map(|f| {
                    let signal = if rng.random_bool(0.3 + 0.1 * f as f64 / n_features as f64) { y } else { 0 };
                    if f % 2 == 0 {
                        FeatureValueTuple::numeric(&format!("f{f}"), rng.random_range(0..5) as f64 + signal as f64, 1)
                    } else {
                        FeatureValueTuple::categorical(&format!("f{f}"), &format!("c{}", rng.random_range(0..3) + signal), 1)
                    }
                })
                .collect();
            e.visits.push(visit);
            e
        })
        .collect();
    (ehrs, labels, catalog)
}

#[test]
fn mrmr_first_pick_is_mi_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let config = OperatorConfig::default();
    for _ in 0..100 {
        let (ehrs, labels, catalog) = random_table(&mut rng);
        let data: Vec<(&PatientEhr, u8)> = ehrs.iter().zip(labels.iter().copied()).collect();
        let mi = mutual_information_scores(&data, &catalog, &config).unwrap();
        let best = mi.scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = mrmr_rank(&data, &catalog, &config).unwrap()[0].clone();
        assert_eq!(mi.scores[&first], best, "mRMR opened with {first}");
    }
}

proptest! {
    #[test]
    fn auroc_invariant_under_increasing_transform(
        raw in prop::collection::vec((0u32..40, any::<bool>()), 2..120),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<u8> = raw.iter().map(|(_, y)| *y as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
        prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&moved, &labels).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..100)) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let labels: Vec<u8> = raw.iter().map(|r| r.1 as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auroc(&scores, &labels).unwrap();
        let p = auprc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
    }

    #[test]
    fn mi_is_symmetric_and_nonnegative(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..200)) {
        let a: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let ab = mutual_information(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mutual_information(&b, &a)).abs() < 1e-12);
        prop_assert!(mutual_information(&a, &a) + 1e-12 >= ab);
    }
}

#[test]
fn random_scores_give_prevalence_auprc() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.1) as u8).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let prevalence = labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
    assert!((auprc(&scores, &labels).unwrap() - prevalence).abs() < 0.02);
    assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn bootstrap_is_seeded_and_tracks_point_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<u8> = (0..400).map(|_| rng.random_bool(0.3) as u8).collect();
    let scores: Vec<f64> = labels.iter().map(|&y| y as f64 * 0.5 + rng.random::<f64>()).collect();
    let a = bootstrap_metrics(&scores, &labels, 300, 1).unwrap();
    assert_eq!(a, bootstrap_metrics(&scores, &labels, 300, 1).unwrap());
    assert!((a.auroc - a.auroc_point).abs() < 0.01);
    assert!(a.auroc_std > 0.0 && a.auroc_std < 0.05);
}
