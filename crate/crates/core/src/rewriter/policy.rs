use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{FeatureCatalog, FeatureId, Modality, PatientEhr, Rewrite, RewriteSource};
use crate::error::{Error, Result};
use crate::math::{log_sigmoid, sigmoid};
use crate::seed;

/// recency, abnormal flag, then one slot per modality.
pub const CONTEXT_DIM: usize = 2 + Modality::ALL.len();

const MAX_REDRAWS: usize = 8;

/// Per-tuple context the policy conditions on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TupleContext {
    /// `t / T_max`, 0 when `T_max = 0`.
    pub recency: f64,
    pub abnormal: bool,
    pub modality: Modality,
}

impl TupleContext {
    pub fn features(&self) -> [f64; CONTEXT_DIM] {
        let mut v = [0.0; CONTEXT_DIM];
        v[0] = self.recency;
        v[1] = if self.abnormal { 1.0 } else { 0.0 };
        v[2 + self.modality.index()] = 1.0;
        v
    }
}

pub fn tuple_contexts(ehr: &PatientEhr, catalog: &FeatureCatalog) -> Result<Vec<TupleContext>> {
    let t_max = ehr.max_timestamp();
    ehr.tuples()
        .map(|t| {
            let info = catalog.require(&t.feature)?;
            Ok(TupleContext {
                recency: if t_max == 0 { 0.0 } else { t.timestamp as f64 / t_max as f64 },
                abnormal: info.is_abnormal(&t.value),
                modality: info.modality,
            })
        })
        .collect()
}

/// Feature-mask Bernoulli policy: tuple `j` is kept independently with
/// probability `sigmoid(feature_logit[f_j] + context_weights . ctx_j)`.
/// Features absent from `feature_logits` have logit 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriterPolicy {
    pub feature_logits: BTreeMap<FeatureId, f64>,
    pub context_weights: [f64; CONTEXT_DIM],
    pub rng_seed: u64,
}

impl Default for RewriterPolicy {
    fn default() -> Self {
        RewriterPolicy::zeros(0)
    }
}

/// An EHR with its per-tuple features and contexts resolved once, so repeated
/// likelihood evaluations under changing parameters skip catalog lookups.
#[derive(Clone, Debug)]
pub struct PreparedEhr {
    pub features: Vec<FeatureId>,
    pub contexts: Vec<[f64; CONTEXT_DIM]>,
}

impl PreparedEhr {
    pub fn new(ehr: &PatientEhr, catalog: &FeatureCatalog) -> Result<Self> {
        Ok(PreparedEhr {
            features: ehr.tuples().map(|t| t.feature.clone()).collect(),
            contexts: tuple_contexts(ehr, catalog)?.iter().map(TupleContext::features).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Addresses one scalar parameter of a policy.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRef {
    Feature(FeatureId),
    Context(usize),
}

/// Gradient (or any parameter-shaped delta) of a policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyGradient {
    pub features: BTreeMap<FeatureId, f64>,
    pub context: [f64; CONTEXT_DIM],
}

impl PolicyGradient {
    /// Accumulates `weight * d log p(mask) / d theta`-style contributions given
    /// the per-tuple derivative with respect to the tuple logit.
    pub fn add_tuple(&mut self, feature: &str, ctx: &[f64; CONTEXT_DIM], d_logit: f64) {
        if let Some(g) = self.features.get_mut(feature) {
            *g += d_logit;
        } else {
            self.features.insert(feature.to_string(), d_logit);
        }
        for (c, x) in self.context.iter_mut().zip(ctx) {
            *c += d_logit * x;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.features.values_mut().for_each(|g| *g *= s);
        self.context.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &PolicyGradient, s: f64) {
        for (f, g) in &other.features {
            *self.features.entry(f.clone()).or_insert(0.0) += s * g;
        }
        for (c, g) in self.context.iter_mut().zip(&other.context) {
            *c += s * g;
        }
    }

    pub fn get(&self, p: &ParamRef) -> f64 {
        match p {
            ParamRef::Feature(f) => self.features.get(f).copied().unwrap_or(0.0),
            ParamRef::Context(i) => self.context[*i],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.features.values().chain(self.context.iter()).all(|v| v.is_finite())
    }
}

impl RewriterPolicy {
    /// The untrained policy: every tuple kept with probability 1/2.
    pub fn zeros(rng_seed: u64) -> Self {
        RewriterPolicy {
            feature_logits: BTreeMap::new(),
            context_weights: [0.0; CONTEXT_DIM],
            rng_seed,
        }
    }

    pub fn feature_logit(&self, feature: &str) -> f64 {
        self.feature_logits.get(feature).copied().unwrap_or(0.0)
    }

    pub fn logit(&self, feature: &str, ctx: &[f64; CONTEXT_DIM]) -> f64 {
        self.feature_logit(feature) + self.context_weights.iter().zip(ctx).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn logits(&self, prepared: &PreparedEhr) -> Vec<f64> {
        prepared
            .features
            .iter()
            .zip(&prepared.contexts)
            .map(|(f, c)| self.logit(f, c))
            .collect()
    }

    pub fn get(&self, p: &ParamRef) -> f64 {
        match p {
            ParamRef::Feature(f) => self.feature_logit(f),
            ParamRef::Context(i) => self.context_weights[*i],
        }
    }

    pub fn set(&mut self, p: &ParamRef, value: f64) {
        match p {
            ParamRef::Feature(f) => {
                self.feature_logits.insert(f.clone(), value);
            }
            ParamRef::Context(i) => self.context_weights[*i] = value,
        }
    }

    /// Gradient-descent step `theta -= lr * grad`.
    pub fn step(&mut self, grad: &PolicyGradient, learning_rate: f64) {
        for (f, g) in &grad.features {
            *self.feature_logits.entry(f.clone()).or_insert(0.0) -= learning_rate * g;
        }
        for (w, g) in self.context_weights.iter_mut().zip(&grad.context) {
            *w -= learning_rate * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.feature_logits.values().chain(self.context_weights.iter()).all(|v| v.is_finite())
    }

    /// Euclidean distance between parameter vectors (missing feature logits read as 0).
    pub fn distance(&self, other: &RewriterPolicy) -> f64 {
        let keys: std::collections::BTreeSet<&FeatureId> =
            self.feature_logits.keys().chain(other.feature_logits.keys()).collect();
        let f: f64 = keys
            .into_iter()
            .map(|k| (self.feature_logit(k) - other.feature_logit(k)).powi(2))
            .sum();
        let c: f64 = self
            .context_weights
            .iter()
            .zip(&other.context_weights)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        (f + c).sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn tuple_logit(policy: &RewriterPolicy, ehr: &PatientEhr, tuple_index: usize, catalog: &FeatureCatalog) -> Result<f64> {
    let tuple = ehr
        .tuples()
        .nth(tuple_index)
        .ok_or_else(|| Error::NotASubset(format!("tuple index {tuple_index} out of range")))?;
    let ctx = tuple_contexts(ehr, catalog)?[tuple_index];
    Ok(policy.logit(&tuple.feature, &ctx.features()))
}

/// `sum_j m_j ln q_j + (1 - m_j) ln(1 - q_j)` for logits `z`.
pub fn mask_logprob(logits: &[f64], mask: &[bool]) -> f64 {
    logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { log_sigmoid(z) } else { log_sigmoid(-z) })
        .sum()
}

/// Exact log-probability that the policy generates `rewrite` from `ehr`.
pub fn rewrite_logprob(policy: &RewriterPolicy, ehr: &PatientEhr, rewrite: &Rewrite, catalog: &FeatureCatalog) -> Result<f64> {
    let mask = rewrite.mask(ehr)?;
    let prepared = PreparedEhr::new(ehr, catalog)?;
    Ok(mask_logprob(&policy.logits(&prepared), &mask))
}

/// Adds `weight * d log p(mask) / d theta` to `grad`.
pub fn accumulate_logprob_gradient(
    policy: &RewriterPolicy,
    prepared: &PreparedEhr,
    mask: &[bool],
    weight: f64,
    grad: &mut PolicyGradient,
) {
    for ((f, ctx), &m) in prepared.features.iter().zip(&prepared.contexts).zip(mask) {
        let q = sigmoid(policy.logit(f, ctx));
        let target = if m { 1.0 } else { 0.0 };
        grad.add_tuple(f, ctx, weight * (target - q));
    }
}

/// Draws `n` rewrites with their exact log-probabilities.
///
/// An empty draw is redrawn up to 8 times; if still empty, the tuple with the
/// highest inclusion probability is kept. An EHR with no tuples yields empty
/// rewrites with log-probability 0.
pub fn sample_rewrites(
    policy: &RewriterPolicy,
    ehr: &PatientEhr,
    catalog: &FeatureCatalog,
    n: usize,
    seed_value: u64,
) -> Result<Vec<Rewrite>> {
    let prepared = PreparedEhr::new(ehr, catalog)?;
    Ok(sample_prepared(policy, &prepared, &ehr.patient_id, n, seed_value))
}

pub fn sample_prepared(
    policy: &RewriterPolicy,
    prepared: &PreparedEhr,
    patient_id: &str,
    n: usize,
    seed_value: u64,
) -> Vec<Rewrite> {
    let logits = policy.logits(prepared);
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut rng = seed::rng(seed::derive(seed_value, &[patient_id, "policy-sample"]));
    (0..n)
        .map(|_| {
            let mut mask = vec![false; probs.len()];
            for _ in 0..=MAX_REDRAWS {
                for (m, &q) in mask.iter_mut().zip(&probs) {
                    *m = rng.random::<f64>() < q;
                }
                if mask.iter().any(|&m| m) || mask.is_empty() {
                    break;
                }
            }
            if !mask.is_empty() && !mask.iter().any(|&m| m) {
                let best = probs
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, q)| if *q > probs[b] { i } else { b });
                mask[best] = true;
            }
            let kept = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            Rewrite::new(kept, RewriteSource::Policy).with_logprob(mask_logprob(&logits, &mask))
        })
        .collect()
}

/// A (source EHR, target mask) pair for likelihood training.
#[derive(Clone, Debug)]
pub struct MaskExample {
    pub prepared: PreparedEhr,
    pub mask: Vec<bool>,
}

impl MaskExample {
    pub fn new(ehr: &PatientEhr, rewrite: &Rewrite, catalog: &FeatureCatalog) -> Result<Self> {
        Ok(MaskExample {
            prepared: PreparedEhr::new(ehr, catalog)?,
            mask: rewrite.mask(ehr)?,
        })
    }
}

/// Mean per-tuple negative log-likelihood of the target masks and its gradient.
/// This is the rewriter's language-modelling loss.
pub fn mle_loss_and_gradient(policy: &RewriterPolicy, examples: &[&MaskExample]) -> (f64, PolicyGradient) {
    let total_tuples: usize = examples.iter().map(|e| e.prepared.len()).sum();
    let mut grad = PolicyGradient::default();
    if total_tuples == 0 {
        return (0.0, grad);
    }
    let mut ll = 0.0;
    for e in examples {
        ll += mask_logprob(&policy.logits(&e.prepared), &e.mask);
        accumulate_logprob_gradient(policy, &e.prepared, &e.mask, 1.0, &mut grad);
    }
    let n = total_tuples as f64;
    // d(-ll/n)/dtheta
    grad.scale(-1.0 / n);
    (-ll / n, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            learning_rate: 1.0,
            epochs: 200,
        }
    }
}

/// Full-batch gradient ascent on the mean per-tuple log-likelihood of the
/// pseudo-label masks. Returns the updated policy and the log-likelihood
/// (negated loss) before each epoch plus after the last one.
pub fn mle_finetune(policy: &RewriterPolicy, examples: &[MaskExample], config: &MleConfig) -> Result<(RewriterPolicy, Vec<f64>)> {
    let mut policy = policy.clone();
    if examples.is_empty() {
        return Ok((policy, Vec::new()));
    }
    let refs: Vec<&MaskExample> = examples.iter().collect();
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = mle_loss_and_gradient(&policy, &refs);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("rewriter likelihood epoch {epoch}"),
            });
        }
        history.push(-loss);
        policy.step(&grad, config.learning_rate);
    }
    let (loss, _) = mle_loss_and_gradient(&policy, &refs);
    if !loss.is_finite() || !policy.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "rewriter likelihood final".into(),
        });
    }
    history.push(-loss);
    Ok((policy, history))
}
