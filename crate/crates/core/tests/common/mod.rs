#![allow(dead_code)]

use std::collections::BTreeMap;

use ehr_rewrite::rewriter::{RewriterPolicy, CONTEXT_DIM};
use ehr_rewrite::{FeatureCatalog, FeatureInfo, FeatureValueTuple, Modality, PatientEhr, Rewrite, RewriteSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const FEATURES: [&str; 6] = ["k", "na", "hr", "dx_a", "med_b", "age"];

pub fn catalog() -> FeatureCatalog {
    let mut e = BTreeMap::new();
    e.insert("k".into(), FeatureInfo::numeric("potassium", Modality::Lab, Some((3.5, 5.0))));
    e.insert("na".into(), FeatureInfo::numeric("sodium", Modality::Lab, Some((135.0, 145.0))));
    e.insert("hr".into(), FeatureInfo::numeric("heart rate", Modality::Other, None));
    e.insert("dx_a".into(), FeatureInfo::categorical("diagnosis a", Modality::Diagnosis));
    e.insert("med_b".into(), FeatureInfo::categorical("medication b", Modality::Medication));
    e.insert("age".into(), FeatureInfo::numeric("age", Modality::Demographic, None));
    FeatureCatalog::new(e).unwrap()
}

/// EHR with exactly `n` tuples spread over one or two visits.
pub fn ehr(rng: &mut ChaCha8Rng, id: &str, n: usize) -> PatientEhr {
    let mut e = PatientEhr::new(id);
    let mut tuples = Vec::with_capacity(n);
    for i in 0..n {
        let f = FEATURES[rng.random_range(0..5)];
        let t = i as u64 + 1;
        let tuple = match f {
            "dx_a" | "med_b" => FeatureValueTuple::categorical(f, &format!("v{}", rng.random_range(0..3)), t),
            "na" => FeatureValueTuple::numeric(f, rng.random_range(125..155) as f64, t),
            _ => FeatureValueTuple::numeric(f, rng.random_range(1..9) as f64, t),
        };
        tuples.push(tuple);
    }
    let split = if n > 3 { n / 2 } else { n };
    let rest = tuples.split_off(split);
    e.visits.push(tuples);
    if !rest.is_empty() {
        e.visits.push(rest);
    }
    e
}

pub fn random_policy(rng: &mut ChaCha8Rng, scale: f64) -> RewriterPolicy {
    let mut p = RewriterPolicy::zeros(0);
    for f in FEATURES {
        p.feature_logits.insert(f.to_string(), rng.random_range(-scale..scale));
    }
    for w in p.context_weights.iter_mut().take(CONTEXT_DIM) {
        *w = rng.random_range(-scale..scale);
    }
    p
}

pub fn random_rewrite(rng: &mut ChaCha8Rng, n: usize) -> Rewrite {
    let mut kept: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..n));
    }
    Rewrite::new(kept, RewriteSource::Policy)
}

/// Central-difference check: every coordinate agrees within `rel` relative
/// error (absolute floor `abs_floor` for near-zero partials).
pub fn assert_close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64, what: &str) {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        err <= rel * scale || err <= abs_floor,
        "{what}: analytic {analytic:e} vs numeric {numeric:e} (rel {:e})",
        err / scale.max(f64::MIN_POSITIVE)
    );
}
