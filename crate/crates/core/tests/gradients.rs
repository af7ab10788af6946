mod common;

use common::*;
use ehr_rewrite::alignment::{alignment_loss_and_gradient, AlignGroup, AlignmentConfig};
use ehr_rewrite::predictor::{encode_examples, Architecture, Encoded, PredictorModel};
use ehr_rewrite::rewriter::{mle_loss_and_gradient, MaskExample, ParamRef, RewriterPolicy, CONTEXT_DIM};
use rand::Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;

fn params_of(policy: &RewriterPolicy) -> Vec<ParamRef> {
    let mut refs: Vec<ParamRef> = FEATURES.iter().map(|f| ParamRef::Feature(f.to_string())).collect();
    refs.extend((0..CONTEXT_DIM).map(ParamRef::Context));
    debug_assert!(refs.iter().all(|r| policy.get(r).is_finite()));
    refs
}

fn fd_policy(policy: &RewriterPolicy, p: &ParamRef, loss: impl Fn(&RewriterPolicy) -> f64) -> f64 {
    let mut plus = policy.clone();
    plus.set(p, policy.get(p) + H);
    let mut minus = policy.clone();
    minus.set(p, policy.get(p) - H);
    (loss(&plus) - loss(&minus)) / (2.0 * H)
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let words = ["# lab", "- potassium: 4.1", "- sodium: 140", "fever", "- k: 3", "sepsis", "- hr: 88"];
    for instance in 0..50 {
        let hidden = [0, 1, 3][instance % 3];
        let arch = Architecture { hash_dim: 16, hidden_units: hidden };
        let mut model = PredictorModel::zeros(arch);
        for p in model.params.iter_mut() {
            *p = r.random_range(-1.0..1.0);
        }
        let texts: Vec<(String, u8)> = (0..r.random_range(1..6))
            .map(|_| {
                let n = r.random_range(1..5);
                let t: Vec<&str> = (0..n).map(|_| words[r.random_range(0..words.len())]).collect();
                (t.join("\n"), r.random_range(0..2))
            })
            .collect();
        let encoded = encode_examples(&texts, arch.hash_dim);
        let batch: Vec<&Encoded> = encoded.iter().collect();
        let (_, grad) = model.loss_and_gradient(&batch);
        let dense = grad.to_dense(arch.n_params());
        for (i, &analytic) in dense.iter().enumerate() {
            let mut plus = model.clone();
            plus.params[i] += H;
            let mut minus = model.clone();
            minus.params[i] -= H;
            let numeric = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * H);
            assert_close(analytic, numeric, REL, 1e-9, &format!("instance {instance} param {i}"));
        }
    }
}

#[test]
fn mle_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let cat = catalog();
    for instance in 0..50 {
        let policy = random_policy(&mut r, 1.5);
        let examples: Vec<MaskExample> = (0..r.random_range(1..4))
            .map(|k| {
                let n = r.random_range(1..9);
                let e = ehr(&mut r, &format!("p{k}"), n);
                let rw = random_rewrite(&mut r, n);
                MaskExample::new(&e, &rw, &cat).unwrap()
            })
            .collect();
        let refs: Vec<&MaskExample> = examples.iter().collect();
        let (_, grad) = mle_loss_and_gradient(&policy, &refs);
        for p in params_of(&policy) {
            let numeric = fd_policy(&policy, &p, |q| mle_loss_and_gradient(q, &refs).0);
            assert_close(grad.get(&p), numeric, REL, 1e-9, &format!("instance {instance} {p:?}"));
        }
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let cat = catalog();
    for instance in 0..50 {
        let policy = random_policy(&mut r, 1.0);
        let config = AlignmentConfig {
            kappa: [1.0, 0.5, 2.0][instance % 3],
            tau: 0.5,
            lambda_mix: [0.0, 0.25, 0.6][instance % 3],
            ..AlignmentConfig::default()
        };
        let mut groups = Vec::new();
        let mut pairs = Vec::new();
        for k in 0..r.random_range(1..4) {
            let n = r.random_range(2..8);
            let e = ehr(&mut r, &format!("p{k}"), n);
            let cands: Vec<_> = (0..r.random_range(2..6)).map(|_| random_rewrite(&mut r, n)).collect();
            let scores: Vec<f64> = cands.iter().map(|_| r.random_range(0.05..0.95)).collect();
            groups.push(AlignGroup::new(&e, &cands, &scores, &cat, config.tau).unwrap());
            pairs.push(MaskExample::new(&e, &cands[0], &cat).unwrap());
        }
        let g: Vec<&AlignGroup> = groups.iter().collect();
        let pr: Vec<&MaskExample> = pairs.iter().collect();
        let (parts, grad) = alignment_loss_and_gradient(&policy, &g, &pr, &config);
        assert!(parts.kl_loss > 0.0);
        for p in params_of(&policy) {
            let numeric = fd_policy(&policy, &p, |q| alignment_loss_and_gradient(q, &g, &pr, &config).0.total_loss);
            assert_close(grad.get(&p), numeric, REL, 1e-9, &format!("instance {instance} {p:?}"));
        }
    }
}
